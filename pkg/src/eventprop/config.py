"""Run configuration: named profiles plus an INI-style override file.

A configuration file is line oriented::

    [training]
    eta = 0.002
    epochs = 40

Every key must belong to a known section. Values are parsed as booleans,
integers, floats or strings, in that order. Profiles supply complete
defaults; the keys listed in ``REQUIRED`` have no default and must come from
the profile or the file.
"""
from __future__ import annotations

import configparser
import copy
from typing import Dict, Optional

from .data import AugmentConfig
from .errors import ConfigError
from .training import TrainConfig

SECTIONS = ("data", "network", "loss", "training", "augment", "gradcheck", "pathology")

# section -> key -> default (None marks a required key)
BASE: Dict[str, dict] = {
    "data": {
        "source": None,            # synthetic | mnist | idx | file
        "train_file": "",
        "test_file": "",
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "n_train": 2000,
        "n_test": 500,
        "split_seed": 0,
        "duration": 20.0,
        "n_classes": 20,
        "per_class": 16,
        "test_per_class": 4,
        "n_channels": 80,
        "n_speakers": 4,
        "lead": 300.0,
        "active": 300.0,
        "trail": 300.0,
        "rate": 30.0,
        "blobs": 6,
        "noise": 0.0,
        "data_seed": 100,
        "classes": "",
    },
    "network": {
        "n_hidden": None,
        "n_out": 0,                # 0: number of classes in the data
        "recurrent": False,
        "autapses": False,
        "tau_mem": 20.0,
        "tau_syn": 5.0,
        "tau_init": "homogeneous",
        "learn_tau": False,
        "mu_ih": 0.03,
        "sigma_ih": 0.01,
        "mu_hh": 0.0,
        "sigma_hh": 0.02,
        "mu_ho": 0.0,
        "sigma_ho": 0.03,
    },
    "loss": {
        "kind": None,
        "tau0": 1.0,
        "tau1": 100.0,
        "alpha": 5e-5,
        "phantom_spikes": True,
    },
    "training": {
        "eta": 1e-3,
        "ease_in": False,
        "schedule": False,
        "k_reg": 0.0,
        "nu_hidden": 14.0,
        "p_drop_in": 0.0,
        "p_drop_hid": 0.0,
        "batch_size": 32,
        "epochs": 10,
        "dt": 1.0,
        "seed": 0,
        "silent_boost": False,
        "early_stop": "train",
        "spike_cap": 4096,
    },
    "augment": {
        "shift": False,
        "f_shift": 40.0,
        "blend": False,
        "p_blend": 0.5,
        "n_blend_extra": 0,        # 0: as many as the training set
        "jitter": False,
        "sigma_u": 0.0,
        "dilate": False,
        "k_scale_min": 1.0,
        "k_scale_max": 1.0,
        "delay": False,
        "n_delay": 10,
        "t_delay": 30.0,
    },
    "gradcheck": {
        "network": "random",       # random | chain
        "seeds": 20,
        "losses": "sum,sum_exp,xentropy,max",
        "tolerance": 1e-5,
        "tolerance_max": 1e-3,
        "tolerance_tau": 1e-4,
        "include_tau": False,
        "dt": 0.1,
    },
    "pathology": {
        "train_class": 0,
        "top_neurons": 4,
    },
}


def _profile(**sections):
    out = copy.deepcopy(BASE)
    for sec, kv in sections.items():
        for k, v in kv.items():
            if k not in out[sec]:
                raise KeyError(f"{sec}.{k}")
            out[sec][k] = v
    return out


_SHD_LOSS = {
    # tau_mem, tau_syn, k_reg (ffwd), mu_ho, sigma_ho, eta
    "sum": (20.0, 10.0, 1e-12, 0.0, 0.03, 2e-3),
    "sum_exp": (40.0, 5.0, 1e-10, 0.0, 0.03, 1e-3),
    "time": (40.0, 5.0, 1e-7, 1.2, 0.6, 1e-3),
    "max": (40.0, 10.0, 5e-9, 0.0, 0.03, 2e-3),
    "xentropy": (20.0, 5.0, 1e-10, 0.0, 0.03, 1e-3),
}


def _shd_base(loss):
    tm, ts, k, mu_ho, s_ho, eta = _SHD_LOSS[loss]
    return _profile(
        data={"source": "file", "train_file": None, "test_file": None},
        network={"n_hidden": 256, "tau_mem": tm, "tau_syn": ts, "mu_ih": 0.03, "sigma_ih": 0.01,
                 "mu_hh": 0.0, "sigma_hh": 0.02, "mu_ho": mu_ho, "sigma_ho": s_ho},
        loss={"kind": loss, "tau0": 1.0, "tau1": 100.0, "alpha": 5e-5},
        training={"eta": eta, "k_reg": k, "nu_hidden": 14.0, "epochs": 300, "ease_in": True,
                  "schedule": True, "early_stop": "validation"},
    )


def _final(epochs, k_reg):
    p = _shd_base("sum_exp")
    p["network"].update(n_hidden=512, recurrent=True, tau_mem=20.0, tau_init="heterogeneous",
                        learn_tau=True)
    p["training"].update(epochs=epochs, k_reg=k_reg, silent_boost=True)
    p["augment"].update(shift=True, blend=True, delay=True)
    return p


PROFILES: Dict[str, dict] = {
    "mnist-base": _profile(
        data={"source": "mnist", "n_train": 2000, "n_test": 500, "duration": 20.0},
        network={"n_hidden": 64, "tau_mem": 20.0, "tau_syn": 5.0, "mu_ih": 0.045,
                 "sigma_ih": 0.045, "mu_ho": 0.2, "sigma_ho": 0.37},
        loss={"kind": "sum", "tau0": 1.0, "tau1": 3.0, "alpha": 3.6e-4},
        training={"eta": 1e-2, "p_drop_in": 0.2, "epochs": 20, "early_stop": "none"},
    ),
    "mnist-full": _profile(
        data={"source": "idx", "train_images": None, "train_labels": None,
              "test_images": None, "test_labels": None, "duration": 20.0},
        network={"n_hidden": 128, "tau_mem": 20.0, "tau_syn": 5.0, "mu_ih": 0.045,
                 "sigma_ih": 0.045, "mu_ho": 0.2, "sigma_ho": 0.37},
        loss={"kind": "xentropy", "tau0": 1.0, "tau1": 3.0, "alpha": 3.6e-4},
        training={"eta": 1e-2, "p_drop_in": 0.2, "epochs": 50, "early_stop": "none"},
    ),
    "shd-final": _final(100, 5e-10),
    "ssc-final": _final(50, 5e-10),
    "chain-sum": _profile(
        data={"source": "synthetic"},
        network={"n_hidden": 2},
        loss={"kind": "sum"},
        gradcheck={"network": "chain", "losses": "sum", "dt": 0.1},
    ),
    "pathology": _profile(
        data={"source": "synthetic", "n_classes": 20, "per_class": 160, "test_per_class": 16,
              "rate": 30.0, "blobs": 6, "classes": "0"},
        network={"n_hidden": 64, "n_out": 20, "mu_ih": 0.15, "sigma_ih": 0.075},
        loss={"kind": "xentropy"},
        training={"eta": 1e-3, "k_reg": 0.02, "nu_hidden": 14.0, "epochs": 30},
    ),
    "synthetic": _profile(
        data={"source": "synthetic", "n_classes": 20, "per_class": 16, "test_per_class": 4,
              "rate": 30.0, "blobs": 6},
        network={"n_hidden": 64, "mu_ih": 0.15, "sigma_ih": 0.075},
        loss={"kind": "sum_exp"},
        training={"eta": 1e-3, "epochs": 50},
    ),
    "loss-contrast": _profile(
        data={"source": "synthetic", "n_classes": 10, "per_class": 8, "test_per_class": 2,
              "lead": 50.0, "active": 300.0, "trail": 50.0, "rate": 30.0, "blobs": 6},
        network={"n_hidden": 64, "mu_ih": 0.15, "sigma_ih": 0.075},
        loss={"kind": "sum_exp"},
        training={"eta": 1e-3, "epochs": 50},
    ),
}
for _loss in _SHD_LOSS:
    PROFILES[f"shd-base-{_loss}"] = _shd_base(_loss)

REQUIRED = ("data.source", "network.n_hidden", "loss.kind")


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def read_overrides(text: str) -> Dict[str, dict]:
    """Parse override text; unknown sections or keys are a hard error."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse configuration: {e}") from None
    unknown, out = [], {}
    for sec in cp.sections():
        if sec not in BASE:
            unknown.extend([f"{sec}.{k}" for k in cp[sec]] or [f"[{sec}]"])
            continue
        for k, v in cp[sec].items():
            if k not in BASE[sec]:
                unknown.append(f"{sec}.{k}")
            else:
                out.setdefault(sec, {})[k] = parse_value(v)
    if unknown:
        raise ConfigError("unknown configuration keys: " + ", ".join(sorted(unknown)))
    return out


def resolve(profile: Optional[str] = None, text: str = "", overrides: Optional[dict] = None):
    """Profile defaults, then file text, then explicit overrides."""
    if profile is not None and profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; known: {', '.join(sorted(PROFILES))}")
    cfg = copy.deepcopy(PROFILES[profile] if profile else BASE)
    for layer in (read_overrides(text) if text else {}, overrides or {}):
        for sec, kv in layer.items():
            for k, v in kv.items():
                if sec not in cfg or k not in cfg[sec]:
                    raise ConfigError(f"unknown configuration keys: {sec}.{k}")
                cfg[sec][k] = v
    missing = [f"{s}.{k}" for s, kv in cfg.items() for k, v in kv.items() if v is None]
    if missing:
        raise ConfigError(f"profile {profile or '(none)'} is missing required keys: "
                          + ", ".join(missing))
    return cfg


def dump(cfg: Dict[str, dict]) -> str:
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {format_value(v)}" for k, v in cfg[sec].items())
        lines.append("")
    return "\n".join(lines)


def train_config(cfg: Dict[str, dict], n_out: int, n_in: Optional[int] = None) -> TrainConfig:
    net, loss, tr, aug = cfg["network"], cfg["loss"], cfg["training"], dict(cfg["augment"])
    aug["n_blend_extra"] = aug["n_blend_extra"] or None
    return TrainConfig(
        n_hidden=int(net["n_hidden"]), n_out=int(net["n_out"] or n_out), n_in=n_in,
        recurrent=bool(net["recurrent"]), autapses=bool(net["autapses"]),
        loss=str(loss["kind"]), tau0=float(loss["tau0"]), tau1=float(loss["tau1"]),
        alpha=float(loss["alpha"]), phantom_spikes=bool(loss["phantom_spikes"]),
        tau_mem=float(net["tau_mem"]), tau_syn=float(net["tau_syn"]), tau_init=str(net["tau_init"]),
        learn_tau=bool(net["learn_tau"]),
        mu_ih=float(net["mu_ih"]), sigma_ih=float(net["sigma_ih"]),
        mu_hh=float(net["mu_hh"]), sigma_hh=float(net["sigma_hh"]),
        mu_ho=float(net["mu_ho"]), sigma_ho=float(net["sigma_ho"]),
        eta=float(tr["eta"]), ease_in=bool(tr["ease_in"]), schedule=bool(tr["schedule"]),
        k_reg=float(tr["k_reg"]), nu_hidden=float(tr["nu_hidden"]),
        p_drop_in=float(tr["p_drop_in"]), p_drop_hid=float(tr["p_drop_hid"]),
        batch_size=int(tr["batch_size"]), epochs=int(tr["epochs"]), dt=float(tr["dt"]),
        seed=int(tr["seed"]), silent_boost=bool(tr["silent_boost"]),
        early_stop=str(tr["early_stop"]), spike_cap=int(tr["spike_cap"]),
        augment=AugmentConfig(**aug),
    )

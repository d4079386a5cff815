"""Ablation presets built on top of harness configs.

Every variant differs from its base config in exactly one key.
"""
from __future__ import annotations

from .harness import ExperimentConfig, lookup_method

CONTEXT_DROPS = {"collab": "no-collab", "collab+geo": "none"}


def raw_reward_variant(cfg: ExperimentConfig) -> ExperimentConfig:
    """Credit every arriving agent with its grid's whole collected value."""
    if lookup_method(cfg.method).name not in ("cA2C", "cDQN"):
        raise ValueError("the raw-reward ablation applies to cA2C and cDQN")
    return cfg.replace(reward_mode="raw")


def context_drop_variant(cfg: ExperimentConfig, drop="collab") -> ExperimentConfig:
    """Remove the collaborative mask ("collab") or both masks ("collab+geo") from the actor.

    With the geographic mask gone, sampled off-map moves execute as stays.
    """
    if lookup_method(cfg.method).name != "cA2C":
        raise ValueError("context ablations apply to cA2C")
    if drop not in CONTEXT_DROPS:
        raise ValueError(f"drop must be one of {sorted(CONTEXT_DROPS)}")
    return cfg.with_params(context=CONTEXT_DROPS[drop])


def ungrouped_variant(cfg: ExperimentConfig) -> ExperimentConfig:
    """Per-grid demand penalty instead of the neighbourhood-aggregated one."""
    if lookup_method(cfg.method).name != "LP-cA2C":
        raise ValueError("the group-regularizer ablation applies to LP-cA2C")
    return cfg.with_params(grouped=False)


def _table5(cfg):
    base = cfg.replace(method="cA2C")
    return [base, raw_reward_variant(base)]


def _table6(cfg):
    base = cfg.replace(method="cA2C")
    return [base, context_drop_variant(base, "collab"), context_drop_variant(base, "collab+geo")]


def _table8(cfg):
    base = cfg.replace(method="LP-cA2C")
    return [base, ungrouped_variant(base)]


PRESETS = {
    "table5-reward": _table5,
    "table6-context": _table6,
    "table8-group-reg": _table8,
}


def preset(name, cfg: ExperimentConfig):
    """Configs of an ablation preset, base first."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return PRESETS[name](cfg)


def config_diff(a: ExperimentConfig, b: ExperimentConfig):
    """Flattened keys whose values differ between two configs."""
    fa, fb = _flatten(a.to_dict()), _flatten(b.to_dict())
    return sorted(k for k in set(fa) | set(fb) if fa.get(k, None) != fb.get(k, None))


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out

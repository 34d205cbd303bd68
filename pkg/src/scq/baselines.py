"""Comparison agents built from the same training loop.

* ``sac_alpha0``: no OOD penalty and no CVAE (plain offline SAC with twin critics).
* ``scq_layernorm``: no OOD penalty, layer normalization in every critic hidden layer.
* ``cql``: the critic penalty is mean min-Q at actor actions minus mean min-Q at
  dataset actions, applied to every policy action.
"""
from __future__ import annotations

from dataclasses import replace

from .agent import ScqConfig, cql_critic_loss

BASELINES = ("scq", "sac_alpha0", "scq_layernorm", "cql")

__all__ = ["BASELINES", "make_baseline", "cql_critic_loss"]


def make_baseline(kind: str, config: ScqConfig | None = None) -> ScqConfig:
    """Return ``config`` rewritten for the named variant (``"scq"`` returns it unchanged).

    Only the fields that define the variant change, so seeds, network sizes
    and learning rates stay paired across variants.
    """
    config = ScqConfig() if config is None else config
    if kind == "scq":
        return config
    if kind == "sac_alpha0":
        return replace(config, alpha=0.0, use_ood=False, critic_loss="scq")
    if kind == "scq_layernorm":
        return replace(config, alpha=0.0, use_ood=False, layer_norm=True, critic_loss="scq")
    if kind == "cql":
        return replace(config, critic_loss="cql")
    raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")

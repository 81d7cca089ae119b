"""Run configuration: a JSON document plus ``key=value`` overrides (overrides win)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"

    # synthetic data
    lexicon_words: int = 24
    lexicon_tables: int = 5
    styles: int = 3
    n_parallel: int = 2000
    n_qe: int = 2000
    min_len: int = 4
    max_len: int = 12
    bpe_merges: int = 200
    sub_rate: float = 0.12
    del_rate: float = 0.04
    ins_rate: float = 0.04
    rate_jitter: float = 1.0
    splits: list = field(default_factory=lambda: [0.7, 0.15, 0.15])

    # dual-learning predictor
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    ff_dim: int = 128
    experts: int = 3
    dual: bool = True
    nmt_steps: int = 3000
    nmt_batch: int = 32
    nmt_lr: float = 2e-3
    warmup: int = 100
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999

    # cross-lingual LM
    use_xlm: bool = True
    xlm_layers: int = 2
    xlm_steps: int = 2000
    xlm_lr: float = 2e-3
    xlm_batch: int = 32
    tlm_mix: float = 0.5
    select_rate: float = 0.15

    # estimator
    use_f_dual: bool = True
    hidden: int = 32
    head_hidden: int = 32
    pool_mode: str = "mean"
    top_k: int = 3
    w_nmt: float = 0.8
    w_xlm: float = 0.2
    est_epochs: int = 20
    est_lr: float = 2e-3
    est_batch: int = 32
    bad_weight: float = 1.0
    tag_threshold: float = 0.5

    # stacking ensemble
    ensemble_systems: int = 3
    ensemble_folds: int = 5
    ridge_lambda: float = 1e-6

    # corpus filtering
    drop_fraction: float = 0.2
    corrupt_fraction: float = 0.2
    filter_pairs: int = 2000
    filter_styles: int = 1
    filter_seeds: list = field(default_factory=lambda: [0, 1, 2])
    filter_nmt_steps: int = 600
    filter_experts: int = 1
    filter_eval_every: int = 100
    filter_dev_pairs: int = 200
    bleu_checkpoints: int = 3

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(self.to_json(), encoding="utf-8")


def _field_types():
    return {f.name: f for f in fields(RunConfig)}


def _coerce(name, raw, default):
    """Convert a ``--set`` string to the type of the field's default."""
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        value = json.loads(raw)
        if not isinstance(value, list):
            raise ValueError(f"{name}: expected a JSON list, got {raw!r}")
        return value
    return raw


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file at ``path``, then ``overrides`` (a dict or ``key=value`` strings)."""
    known = _field_types()
    values = RunConfig().to_dict()
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"{path}: unknown config keys {unknown}")
        values.update(data)
    items = overrides.items() if isinstance(overrides, dict) else [_split(o) for o in overrides or []]
    for key, raw in items:
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, values[key]) if isinstance(raw, str) and not isinstance(values[key], str) else raw
    return RunConfig(**values)


def _split(item):
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip(), raw.strip()

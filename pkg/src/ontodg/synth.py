"""Deterministic synthetic hierarchies and patient cohorts with temporal domain shift.

Each patient belongs to one hidden domain, a subtree of the hierarchy at
``domain_level``. Condition codes come mostly from that subtree, auxiliary
keys (procedures, drugs) from flat vocabularies. Labels follow a fixed
linear-logit rule on ``[domain one-hot ; history multi-hot]``. Patients whose
last visit falls after ``cutoff_day`` (the target period) see re-weighted
domain frequencies and re-weighted domain logit offsets, both controlled by
``shift_strength``.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng
from .ontology import Hierarchy, build_hierarchy
from .records import CONDITIONS, TaskSpec, make_record, save_dataset

SCHEMA = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    levels: int = 4
    branching: int = 4
    n_patients: int = 2000
    visits_range: tuple = (2, 6)
    n_latent_domains: int = 4
    domain_level: int = 2
    shift_strength: float = 0.8
    label_task: TaskSpec = field(default_factory=TaskSpec)
    noise_rate: float = 0.1
    comorbidity_rate: float = 0.0
    codes_per_visit: tuple = (3, 6)
    aux_keys: tuple = ("procedures", "drugs")
    aux_vocab: int = 20
    aux_codes_per_visit: tuple = (0, 2)
    cutoff_day: int = 3650
    max_day: int = 5475
    target_fraction: float = 0.4
    positive_rate: float = 0.25
    domain_effect: float = 2.0
    history_effect: float = 0.0
    aux_effect: float = 1.0

    def __post_init__(self):
        if self.branching < 2:
            raise ConfigError("branching must be >= 2")
        if self.levels < 3:
            raise ConfigError("levels (H) must be >= 3")
        if not 2 <= self.domain_level <= self.levels:
            raise ConfigError(f"domain_level must lie in [2, {self.levels}]")
        lo, hi = self.visits_range
        if lo < 2 or hi < lo:
            raise ConfigError(f"visits_range must satisfy 2 <= min <= max, got {self.visits_range}")
        for name in ("shift_strength", "noise_rate", "comorbidity_rate", "target_fraction", "positive_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.n_patients < 1:
            raise ConfigError("n_patients must be positive")
        n_sub = self.branching ** (self.domain_level - 1)
        if self.n_latent_domains < 1 or self.n_latent_domains > n_sub:
            raise ConfigError(
                f"n_latent_domains={self.n_latent_domains} infeasible: level {self.domain_level} has {n_sub} subtrees"
            )
        if self.codes_per_visit[0] < 1:
            raise ConfigError("every visit needs at least one condition code")
        if self.cutoff_day >= self.max_day:
            raise ConfigError("cutoff_day must be below max_day")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        schema = d.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise ConfigError(f"unsupported config schema {schema}")
        task = d.pop("label_task", None) or d.pop("task", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        for k in ("visits_range", "codes_per_visit", "aux_keys", "aux_codes_per_visit"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            if task is not None:
                d["label_task"] = TaskSpec(**task) if isinstance(task, dict) else task
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_task"] = asdict(self.label_task)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return {"schema": SCHEMA, **d}

    @classmethod
    def load(cls, path: str | Path) -> "SynthConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None


def generate_hierarchy(cfg: SynthConfig) -> Hierarchy:
    """Complete ``branching``-ary tree with ``levels`` levels.

    Internal nodes are named ``g<level>_<i>``, leaves ``leaf_<i>`` with code
    ``C<i>``.
    """
    b, H = cfg.branching, cfg.levels
    edges = []
    prev = ["root"]
    for level in range(2, H + 1):
        cur = []
        for i, parent in enumerate(prev):
            for j in range(b):
                k = i * b + j
                cur.append(f"leaf_{k:05d}" if level == H else f"g{level}_{k}")
                edges.append((parent, cur[-1]))
        prev = cur
    codes = [(f"C{k:05d}", name) for k, name in enumerate(prev)]
    return build_hierarchy(edges, codes)


@dataclass
class _Plan:
    """Seed-derived quantities shared by every patient."""

    domains: list  # hidden domain NodeIds
    domain_leaf_codes: list  # per domain, tuple of codes
    all_codes: tuple
    aux_codes: dict
    pi: np.ndarray  # (2, D) domain frequencies for source / target
    offsets: np.ndarray  # (2, D, d) domain logit offsets
    w_cond: np.ndarray  # (#codes, d)
    w_aux: dict  # key -> (V, d)


def _plan(cfg: SynthConfig, h: Hierarchy) -> _Plan:
    g = rng.stream(cfg.seed, "plan")
    subtrees = h.nodes_at_level(cfg.domain_level)
    picked = sorted(g.choice(len(subtrees), size=cfg.n_latent_domains, replace=False).tolist())
    domains = [subtrees[i] for i in picked]
    code_of = {leaf: code for code, leaf in h.leaf_map.items()}
    all_codes = tuple(code_of[leaf] for leaf in h.leaves)
    domain_codes = [tuple(code_of[leaf] for leaf in sorted(h.leaf_descendants(n))) for n in domains]
    aux = {k: tuple(f"{k[0].upper()}{i:03d}" for i in range(cfg.aux_vocab)) for k in cfg.aux_keys}

    D, d = len(domains), cfg.label_task.d
    base = 0.8 ** np.arange(D)
    pi_s = base / base.sum()
    pi_alt = pi_s[::-1].copy()
    s = cfg.shift_strength
    pi_t = (1 - s) * pi_s + s * pi_alt

    gl = rng.stream(cfg.seed, "labels", cfg.label_task.kind)
    sign = np.where(np.arange(D) % 2 == 0, 1.0, -1.0)
    if d == 1:
        # evenly spaced magnitudes keep the domains apart along the single label direction
        mag = gl.permutation(np.linspace(0.5, 1.5, D)) if D > 1 else np.ones(1)
        off_s = (sign * mag)[:, None] * cfg.domain_effect
    else:
        off_s = gl.normal(0.0, cfg.domain_effect, size=(D, d))
    off_t = (1.0 - 2.0 * s) * off_s
    w_cond = gl.normal(0.0, cfg.history_effect, size=(len(all_codes), d))
    w_aux = {k: gl.normal(0.0, cfg.aux_effect, size=(cfg.aux_vocab, d)) for k in cfg.aux_keys}
    return _Plan(domains, domain_codes, all_codes, aux, np.stack([pi_s, pi_t]), np.stack([off_s, off_t]), w_cond, w_aux)


def _patient(cfg: SynthConfig, plan: _Plan, i: int):
    g = rng.stream(cfg.seed, "patient", i)
    period = int(g.random() < cfg.target_fraction)
    D = len(plan.domains)
    dom = int(g.choice(D, p=plan.pi[period]))
    second = None
    if cfg.comorbidity_rate > 0 and g.random() < cfg.comorbidity_rate and D > 1:
        second = int((dom + 1 + g.integers(D - 1)) % D)
    T = int(g.integers(cfg.visits_range[0], cfg.visits_range[1] + 1))

    if period:
        last = int(g.integers(cfg.cutoff_day + 1, cfg.max_day + 1))
    else:
        last = int(g.integers(cfg.cutoff_day // 3, cfg.cutoff_day + 1))
    gaps = g.integers(1, 181, size=T - 1)
    days = [last - int(gaps[j:].sum()) for j in range(T - 1)] + [last]

    visits = []
    for t in range(T):
        n = int(g.integers(cfg.codes_per_visit[0], cfg.codes_per_visit[1] + 1))
        conds = set()
        for _ in range(n):
            if g.random() < cfg.noise_rate:
                conds.add(plan.all_codes[int(g.integers(len(plan.all_codes)))])
            else:
                src = dom if second is None or g.random() >= 0.3 else second
                pool = plan.domain_leaf_codes[src]
                conds.add(pool[int(g.integers(len(pool)))])
        codes = {CONDITIONS: tuple(sorted(conds))}
        for k in cfg.aux_keys:
            m = int(g.integers(cfg.aux_codes_per_visit[0], cfg.aux_codes_per_visit[1] + 1))
            pool = plan.aux_codes[k]
            codes[k] = tuple(sorted({pool[int(g.integers(len(pool)))] for _ in range(m)}))
        visits.append((days[t], codes))
    u = g.random(cfg.label_task.d)
    return period, dom, visits, u


def _patients_chunk(args):
    cfg, plan, lo, hi = args
    return [_patient(cfg, plan, i) for i in range(lo, hi)]


def _logits(cfg: SynthConfig, plan: _Plan, raw) -> np.ndarray:
    cidx = {c: j for j, c in enumerate(plan.all_codes)}
    aidx = {k: {c: j for j, c in enumerate(v)} for k, v in plan.aux_codes.items()}
    out = np.empty((len(raw), cfg.label_task.d))
    for i, (period, dom, visits, _) in enumerate(raw):
        z = plan.offsets[period, dom].copy()
        seen = sorted({cidx[c] for _, codes in visits for c in codes[CONDITIONS]})
        z += plan.w_cond[seen].sum(axis=0)
        for k in cfg.aux_keys:
            sk = sorted({aidx[k][c] for _, codes in visits for c in codes[k]})
            if sk:
                z += plan.w_aux[k][sk].sum(axis=0)
        out[i] = z
    return out


def _calibrate_bias(z: np.ndarray, rate: float) -> np.ndarray:
    """Per-column intercept so the expected positive rate equals ``rate``."""
    b = np.zeros(z.shape[1])
    if rate <= 0 or rate >= 1:
        b[:] = -50.0 if rate <= 0 else 50.0
        return b
    for j in range(z.shape[1]):
        lo, hi = -60.0, 60.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if np.mean(1.0 / (1.0 + np.exp(-(z[:, j] + mid)))) < rate:
                lo = mid
            else:
                hi = mid
        b[j] = 0.5 * (lo + hi)
    return b


@dataclass
class Cohort:
    records: list  # PatientRecord
    hidden: dict  # patient id -> {"domain": node name, "period": 0 | 1}


def generate_cohorts(cfg: SynthConfig, h: Hierarchy, workers: int = 1) -> Cohort:
    """Generate ``cfg.n_patients`` records plus the hidden-domain sidecar.

    ``workers > 1`` fans patients out over processes; output is identical to
    the serial run because every patient owns its own random stream.
    """
    plan = _plan(cfg, h)
    n = cfg.n_patients
    if workers > 1:
        step = -(-n // workers)
        chunks = [(cfg, plan, lo, min(n, lo + step)) for lo in range(0, n, step)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            raw = [p for part in ex.map(_patients_chunk, chunks) for p in part]
    else:
        raw = _patients_chunk((cfg, plan, 0, n))

    z = _logits(cfg, plan, raw)
    b = _calibrate_bias(z, cfg.positive_rate)
    prob = 1.0 / (1.0 + np.exp(-(z + b)))
    width = max(5, len(str(n - 1)))
    records, hidden = [], {}
    for i, (period, dom, visits, u) in enumerate(raw):
        pid = f"p{i:0{width}d}"
        positives = np.flatnonzero(u < prob[i]).tolist()
        records.append(make_record(pid, visits, positives, cfg.label_task.d))
        hidden[pid] = {"domain": h.names[plan.domains[dom]], "period": period}
    return Cohort(records, hidden)


def write_outputs(cfg: SynthConfig, out_dir: str | Path, workers: int = 1) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = generate_hierarchy(cfg)
    cohort = generate_cohorts(cfg, h, workers=workers)
    paths = {
        "hierarchy": out / "hierarchy.txt",
        "dataset": out / "dataset.jsonl",
        "hidden": out / "hidden_domains.jsonl",
        "config": out / "synth_config.json",
    }
    h.save(paths["hierarchy"])
    save_dataset(cohort.records, paths["dataset"])
    save_hidden(cohort.hidden, paths["hidden"])
    paths["config"].write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def save_hidden(hidden: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pid in sorted(hidden):
            fh.write(json.dumps({"id": pid, **hidden[pid]}, sort_keys=True) + "\n")


def load_hidden(path: str | Path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj.pop("id")] = obj
    return out


def with_overrides(cfg: SynthConfig, **kw) -> SynthConfig:
    return replace(cfg, **kw)

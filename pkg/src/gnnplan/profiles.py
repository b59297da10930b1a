"""Per-iteration randomness: task durations and flow volumes.

A profile holds empirical sample lists per task kind (durations) and per flow
class (volumes).  Draws are a pure function of ``(seed, iteration)`` and are
made for every dependency edge of the job, colocated or not, so two placements
of the same job see identical traffic (common random numbers).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .model import FLOW_CLASSES, DependencyGraph, FlowKey, JobSpec, TaskKind

KIND_NAMES = tuple(k.value for k in TaskKind)
GRAPH_CLASSES = ("gs_to_sampler", "sampler_to_worker")
MODEL_CLASSES = ("worker_to_ps", "ps_to_worker")

DEFAULT_DURATIONS_MS = {"graph_store": 20.0, "sampler": 60.0, "worker": 80.0, "ps": 10.0}


class ProfileError(ValueError):
    pass


def derive_seed(root: int, *keys: Union[int, str]) -> int:
    """Stable child seed for ``(root, *keys)``; strings are hashed with crc32."""
    words = [int(root) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass(frozen=True)
class Profile:
    durations: Mapping[str, Tuple[float, ...]]  # seconds, per task kind
    volumes: Mapping[str, Tuple[float, ...]]  # bytes, per flow class
    seed: int = 0

    def with_seed(self, seed: int) -> "Profile":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class IterationDraw:
    n: int
    durations: Tuple[float, ...]
    volumes: Mapping[FlowKey, float] = field(default_factory=dict)


def measured_pmr(samples: Sequence[float]) -> float:
    a = np.asarray(samples, dtype=float)
    if a.size == 0:
        raise ValueError("measured_pmr needs at least one sample")
    if np.any(a < 0):
        raise ValueError("samples must be non-negative")
    mean = float(a.mean())
    if mean <= 0:
        raise ValueError("samples have zero mean")
    return float(a.max()) / mean


def _calibrated(mean: float, pmr: float, n: int, rng: np.random.Generator) -> np.ndarray:
    # truncated-lognormal body blended with its mean, or a single peak when the
    # body is not spiky enough; mean and max/mean are hit exactly
    if pmr < 1:
        raise ValueError(f"pmr_target must be >= 1, got {pmr}")
    if n < 1:
        raise ValueError("n_samples must be >= 1")
    if pmr == 1.0:
        return np.full(n, float(mean))
    if pmr > n:
        raise ValueError(f"pmr {pmr} unreachable with {n} non-negative samples")
    body = np.minimum(rng.lognormal(0.0, 0.5, n), np.exp(1.5))
    r = body.max() / body.mean()
    if r >= pmr:
        lam = (pmr - 1.0) / (r - 1.0)
        x = 1.0 - lam + lam * body / body.mean()
    else:
        peak_at = int(np.argmax(body))
        others = np.delete(body, peak_at)
        rest_mean = (n - pmr) / (n - 1)
        others = rest_mean * others / others.mean()
        if others.max() > pmr:
            c = 0.999 * (pmr - rest_mean) / (others.max() - rest_mean)
            others = rest_mean + (others - rest_mean) * c
        x = np.insert(others, peak_at, pmr)
    # renormalise against rounding drift; max/mean is scale invariant
    x = x / x.mean()
    return mean * x


def synth_profile(mean_volume: float, pmr_target: float, n_samples: int = 50, seed: int = 0,
                  *, sampler_to_worker_bytes: Optional[float] = None,
                  model_bytes: float = 1.2e6,
                  durations_ms: Optional[Mapping[str, float]] = None,
                  duration_jitter: float = 0.1) -> Profile:
    """Synthetic profile whose graph-data volumes have the requested peak-to-mean ratio."""
    if pmr_target < 1:
        raise ValueError(f"pmr_target must be >= 1, got {pmr_target}")
    if mean_volume <= 0:
        raise ValueError("mean_volume must be > 0")
    rng = np.random.default_rng(derive_seed(seed, "synth_profile"))
    s2w = 2.0 * mean_volume if sampler_to_worker_bytes is None else sampler_to_worker_bytes
    volumes = {
        "gs_to_sampler": tuple(_calibrated(mean_volume, pmr_target, n_samples, rng).tolist()),
        "sampler_to_worker": tuple(_calibrated(s2w, pmr_target, n_samples, rng).tolist()),
        "worker_to_ps": (float(model_bytes),),
        "ps_to_worker": (float(model_bytes),),
    }
    means = dict(DEFAULT_DURATIONS_MS)
    means.update(durations_ms or {})
    durations = {}
    for kind in KIND_NAMES:
        jitter = rng.uniform(-duration_jitter, duration_jitter, n_samples)
        durations[kind] = tuple((means[kind] * 1e-3 * (1.0 + jitter)).tolist())
    return Profile(durations, volumes, int(seed))


def constant_profile(durations_s: Mapping[str, float], volumes_bytes: Mapping[str, float],
                     seed: int = 0) -> Profile:
    return Profile({k: (float(durations_s[k]),) for k in KIND_NAMES},
                   {k: (float(volumes_bytes[k]),) for k in FLOW_CLASSES}, seed)


def scale_batch(profile: Profile, factor: float) -> Profile:
    """Larger per-sampler batches: more graph traffic and longer sampler/worker compute."""
    if factor <= 0:
        raise ValueError("batch scale must be > 0")
    vols = dict(profile.volumes)
    for c in GRAPH_CLASSES:
        vols[c] = tuple(v * factor for v in vols[c])
    durs = dict(profile.durations)
    for k in ("sampler", "worker"):
        durs[k] = tuple(d * factor for d in durs[k])
    return Profile(durs, vols, profile.seed)


def draw_iteration(profile: Profile, job: JobSpec, graph: DependencyGraph, n: int) -> IterationDraw:
    if n < 1:
        raise ValueError("iterations are numbered from 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(profile.seed) & 0xFFFFFFFF, n]))
    u_task = rng.random(len(job.tasks))
    u_edge = rng.random(len(graph.edges))
    durations = []
    for t, u in zip(job.tasks, u_task):
        samples = profile.durations[t.kind.value]
        durations.append(samples[int(u * len(samples))])
    volumes = {}
    for (s, d, _), u in zip(graph.edges, u_edge):
        samples = profile.volumes[graph.edge_class[(s, d)]]
        volumes[(s, d)] = samples[int(u * len(samples))]
    return IterationDraw(n, tuple(durations), volumes)


def draw_iterations(profile: Profile, job: JobSpec, graph: DependencyGraph,
                    n_iterations: int) -> List[IterationDraw]:
    return [draw_iteration(profile, job, graph, n) for n in range(1, n_iterations + 1)]


def _sample_list(doc: Mapping[str, Any], key: str, path: str, allow_zero: bool) -> Tuple[float, ...]:
    if key not in doc:
        raise ProfileError(f"{path}.{key}: missing")
    raw = doc[key]
    values = raw if isinstance(raw, list) else [raw]
    if not values:
        raise ProfileError(f"{path}.{key}: empty sample list")
    out = []
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ProfileError(f"{path}.{key}[{i}]: not a number")
        if v < 0 or (v == 0 and not allow_zero):
            raise ProfileError(f"{path}.{key}[{i}]: must be {'>= 0' if allow_zero else '> 0'}")
        out.append(float(v))
    return tuple(out)


def load_profile(document: Union[Mapping[str, Any], str, Path]) -> Profile:
    if not isinstance(document, Mapping):
        try:
            document = json.loads(Path(document).read_text())
        except json.JSONDecodeError as exc:
            raise ProfileError(f"profile is not valid JSON: {exc}") from exc
    if not isinstance(document, Mapping):
        raise ProfileError("profile document must be an object")
    for section in ("durations_ms", "volumes_bytes"):
        if not isinstance(document.get(section), Mapping):
            raise ProfileError(f"{section}: missing")
    durations = {k: tuple(v * 1e-3 for v in _sample_list(document["durations_ms"], k,
                                                          "durations_ms", False))
                 for k in KIND_NAMES}
    vols = document["volumes_bytes"]
    volumes = {}
    for c in GRAPH_CLASSES:
        volumes[c] = _sample_list(vols, c, "volumes_bytes", True)
    for c in MODEL_CLASSES:
        vs = _sample_list(vols, c, "volumes_bytes", True)
        if len(set(vs)) != 1:
            raise ProfileError(f"volumes_bytes.{c}: model traffic must be a single constant")
        volumes[c] = vs[:1]
    seed = document.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ProfileError("seed: must be an integer")
    return Profile(durations, volumes, seed)


def dump_profile(profile: Profile) -> Dict[str, Any]:
    return {
        "schema_version": 1,
        "seed": profile.seed,
        "durations_ms": {k: [v * 1e3 for v in profile.durations[k]] for k in KIND_NAMES},
        "volumes_bytes": {
            **{c: list(profile.volumes[c]) for c in GRAPH_CLASSES},
            **{c: profile.volumes[c][0] for c in MODEL_CLASSES},
        },
    }

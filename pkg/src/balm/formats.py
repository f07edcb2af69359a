"""On-disk formats: dataset directories, ground truth, draws files, JSON configs.

Floats are written as shortest round-trip decimal strings, so identical
arrays always serialise to identical bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path
from typing import Any, Optional

import numpy as np
from scipy.special import expit, logit

from .errors import ConfigError, DataError
from .model import layer_means
from .sampler import PosteriorDraws
from .transforms import ParamLayout
from .types import LayerDataset, TemplateSet, edge_index, n_edges, unvech

DATASET_FORMAT = "balm-dataset/1"
DRAWS_FORMAT = "balm-draws/1"
EDGE_ORDER = "upper triangle i < j, row-major, 0-based"
LAYER_PATTERN = "layer_{:04d}.txt"
DRAW_COLUMNS = ("chain", "iter", "divergent", "energy", "depth")


def fmt_float(x: float) -> str:
    return repr(float(x))


def dump_json(obj: Any, path: Path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def _write_matrix(path: Path, A: np.ndarray, integer: bool = False) -> None:
    A = np.atleast_2d(np.asarray(A))
    conv = str if integer else fmt_float
    lines = [" ".join(conv(v) for v in row) for row in A.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_matrix(path: Path, dtype=float) -> np.ndarray:
    try:
        return np.atleast_2d(np.loadtxt(path, dtype=dtype, ndmin=2))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# JSON configs with a strict schema


def _check_type(key: str, value: Any, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _check_type(key, value, args[0])
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"key {key!r} must be a boolean")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key {key!r} must be an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {key!r} must be a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"key {key!r} must be a string")
        return value
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"key {key!r} must be an object")
        return config_from_dict(hint, value, prefix=f"{key}.")
    return value


def config_from_dict(cls, raw: dict, required: tuple[str, ...] = (), prefix: str = ""):
    """Build a dataclass from a JSON object; unknown or missing keys are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key {prefix + key!r}")
    needed = set(required) | {f.name for f in dataclasses.fields(cls)
                              if f.default is dataclasses.MISSING
                              and f.default_factory is dataclasses.MISSING}
    for key in sorted(needed):
        if key not in raw:
            raise ConfigError(f"missing required key {prefix + key!r}")
    values = {k: _check_type(prefix + k, v, hints[k]) for k, v in raw.items()}
    return cls(**values)


def load_config(path, cls, required: tuple[str, ...] = ()):
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return config_from_dict(cls, raw, required)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


# ---------------------------------------------------------------------------
# dataset directories


def weights_from_data(data: LayerDataset, layer: int) -> np.ndarray:
    """Dense ``n x n`` weight matrix in [0, 1); exact zero marks an absent edge."""
    n = data.n
    w = np.where(data.Z[layer] == 1, expit(data.Y[layer]), 0.0)
    if np.any((data.Z[layer] == 1) & ((w <= 0) | (w >= 1))):
        raise DataError(f"layer {layer}: a present edge weight rounds to 0 or 1")
    return unvech(w, n)


def write_dataset(out_dir, data: LayerDataset, extra: Optional[dict] = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for l in range(data.L):
        _write_matrix(out / LAYER_PATTERN.format(l), weights_from_data(data, l))
    fields = ["weights"]
    cov_name = None
    if data.covariates is not None:
        cov_name = "covariates.txt"
        _write_matrix(out / cov_name, data.covariates)
        fields.append("covariates")
    mask = [] if data.mask is None else np.asarray(data.mask).tolist()
    manifest = {
        "format": DATASET_FORMAT,
        "n": data.n,
        "L": data.L,
        "fields": fields,
        "layer_files": LAYER_PATTERN,
        "layer_index_base": 0,
        "edge_order": EDGE_ORDER,
        "mask": mask,
        "covariates": cov_name,
    }
    if extra:
        manifest.update(extra)
    dump_json(manifest, out / "manifest.json")
    return manifest


def _read_manifest(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"missing {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def read_dataset(data_dir) -> tuple[LayerDataset, dict]:
    """Load a dataset directory; weights become logit-scale ``Y``."""
    root = Path(data_dir)
    manifest = _read_manifest(root / "manifest.json")
    for key in ("n", "L"):
        if key not in manifest:
            raise DataError(f"manifest lacks {key!r}")
    n, L = int(manifest["n"]), int(manifest["L"])
    pattern = manifest.get("layer_files", LAYER_PATTERN)
    base = int(manifest.get("layer_index_base", 0))
    iu, ju = edge_index(n)
    Z = np.zeros((L, n_edges(n)), dtype=np.int8)
    Y = np.zeros((L, n_edges(n)))
    for l in range(L):
        path = root / pattern.format(l + base)
        if not path.exists():
            raise DataError(f"missing layer file {path.name}")
        A = _read_matrix(path)
        if A.shape != (n, n):
            raise DataError(f"{path.name}: expected {n}x{n}, got {A.shape[0]}x{A.shape[1]}")
        if not np.all(np.isfinite(A)):
            raise DataError(f"{path.name}: non-finite weight")
        if np.any(np.diag(A) != 0):
            raise DataError(f"{path.name}: diagonal must be zero")
        if not np.array_equal(A, A.T):
            raise DataError(f"{path.name}: matrix is not symmetric")
        if np.any(A < 0) or np.any(A >= 1):
            raise DataError(f"{path.name}: weights must lie in [0, 1)")
        w = A[iu, ju]
        present = w > 0
        Z[l] = present
        Y[l, present] = logit(w[present])
    covariates = None
    if manifest.get("covariates"):
        covariates = _read_matrix(root / manifest["covariates"])
    mask = manifest.get("mask") or None
    if mask is not None:
        mask = np.asarray(mask, dtype=np.int64).reshape(-1, 2)
    return LayerDataset(n, L, Z, Y, mask=mask, covariates=covariates), manifest


def fingerprint(data_dir) -> str:
    """SHA-256 over the manifest and every data file of a dataset directory."""
    root = Path(data_dir)
    digest = hashlib.sha256()
    files = sorted(p for p in root.iterdir() if p.is_file())
    for path in files:
        digest.update(path.name.encode())
        digest.update(b"\0")
        digest.update(path.read_bytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# ground truth


def write_truth(out_dir, truth) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_matrix(out / "templates.txt", truth.templates.Q)
    _write_matrix(out / "weights.txt", truth.W)
    _write_matrix(out / "heldout.txt", np.asarray(truth.mask).reshape(-1, 2), integer=True)
    if truth.gamma is not None:
        _write_matrix(out / "gamma.txt", truth.gamma)
    dump_json({"n": truth.templates.n, "a0": truth.a0, "a1": truth.a1,
               "sigma": truth.sigma, "tau": truth.tau}, out / "scalars.json")


def read_truth(truth_dir):
    from .simgen import GroundTruth

    root = Path(truth_dir)
    scalars = _read_manifest(root / "scalars.json")
    templates = TemplateSet(_read_matrix(root / "templates.txt"), int(scalars["n"]))
    W = _read_matrix(root / "weights.txt")
    heldout_path = root / "heldout.txt"
    text = heldout_path.read_text(encoding="utf-8").strip() if heldout_path.exists() else ""
    heldout = (_read_matrix(heldout_path, dtype=np.int64) if text
               else np.zeros((0, 2), dtype=np.int64))
    gamma = _read_matrix(root / "gamma.txt") if (root / "gamma.txt").exists() else None
    return GroundTruth(templates=templates, W=W, a0=float(scalars["a0"]),
                       a1=float(scalars["a1"]), sigma=float(scalars["sigma"]),
                       mu=layer_means(W, templates), mask=heldout.reshape(-1, 2),
                       gamma=gamma, tau=float(scalars.get("tau", 1.0)))


# ---------------------------------------------------------------------------
# draws files


def layout_descriptor(layout: ParamLayout) -> dict:
    return dataclasses.asdict(layout)


def write_draws(path, draws: PosteriorDraws) -> None:
    """Header line with the layout descriptor, then one CSV row per draw."""
    header = {"format": DRAWS_FORMAT,
              "layout": layout_descriptor(draws.layout) if draws.layout else None,
              "max_tree_depth": draws.max_tree_depth,
              "columns": list(DRAW_COLUMNS) + list(draws.names)}
    lines = ["# " + json.dumps(header, sort_keys=True)]
    C, S, _ = draws.phi.shape
    for c in range(C):
        for s in range(S):
            head = [str(c), str(s), str(int(draws.divergent[c, s])),
                    fmt_float(draws.energy[c, s]), str(int(draws.depth[c, s]))]
            lines.append(",".join(head + [fmt_float(v) for v in draws.phi[c, s]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _draws_error(offset: int, message: str) -> DataError:
    return DataError(f"malformed draws file at byte {offset}: {message}")


def read_draws(path, step_size=None, mass_diag=None) -> PosteriorDraws:
    """Parse a draws file; any malformation names its byte offset."""
    raw = Path(path).read_bytes()
    offset = 0
    rows: list[list[float]] = []
    header = None
    ncol = None
    for line in raw.split(b"\n"):
        start = offset
        offset += len(line) + 1
        if header is None:
            if not line.startswith(b"# "):
                raise _draws_error(start, "expected a '# {...}' header line")
            try:
                header = json.loads(line[2:].decode("utf-8"))
                ncol = len(header["columns"])
                layout = ParamLayout(**header["layout"]) if header.get("layout") else None
            except (ValueError, KeyError, TypeError) as exc:
                raise _draws_error(start, f"bad header ({exc})") from exc
            continue
        if not line.strip():
            if offset < len(raw):
                raise _draws_error(start, "blank line inside data")
            continue
        fields = line.split(b",")
        if len(fields) != ncol:
            raise _draws_error(start, f"expected {ncol} fields, found {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            col = next(i for i, f in enumerate(fields) if not _is_float(f))
            pos = start + sum(len(f) + 1 for f in fields[:col])
            raise _draws_error(pos, f"non-numeric field {fields[col][:20]!r}") from None
    if header is None:
        raise _draws_error(0, "empty file")
    if not rows:
        raise _draws_error(len(raw), "no draws")
    table = np.array(rows)
    chain = table[:, 0].astype(np.int64)
    it = table[:, 1].astype(np.int64)
    C = int(chain.max()) + 1
    S = int(it.max()) + 1
    if table.shape[0] != C * S or not (np.array_equal(chain, np.repeat(np.arange(C), S))
                                       and np.array_equal(it, np.tile(np.arange(S), C))):
        raise _draws_error(len(raw), "rows are not a complete chain-major grid")
    dim = ncol - len(DRAW_COLUMNS)
    if layout is not None and layout.size != dim:
        raise _draws_error(0, f"layout expects {layout.size} parameters, header lists {dim}")
    grid = table.reshape(C, S, ncol)
    return PosteriorDraws(
        phi=grid[:, :, len(DRAW_COLUMNS):].copy(),
        energy=grid[:, :, 3].copy(),
        divergent=grid[:, :, 2].astype(bool),
        depth=grid[:, :, 4].astype(np.int64),
        accept_stat=np.full((C, S), np.nan),
        step_size=np.full(C, np.nan) if step_size is None else np.asarray(step_size, dtype=float),
        mass_diag=np.full((C, dim), np.nan) if mass_diag is None else np.asarray(mass_diag, dtype=float),
        names=list(header["columns"][len(DRAW_COLUMNS):]),
        max_tree_depth=int(header.get("max_tree_depth", 10)),
        layout=layout,
    )


def _is_float(field: bytes) -> bool:
    try:
        float(field)
        return True
    except ValueError:
        return False


def write_chain_stats(path, draws: PosteriorDraws) -> None:
    """Per-chain adaptation results and sampler statistics."""
    cols = ["chain", "step_size", "mean_accept_stat", "divergences", "max_depth_hits"]
    cols += [f"mass_diag[{name}]" for name in draws.names]
    lines = [",".join(cols)]
    for c in range(draws.chains):
        row = [str(c), fmt_float(draws.step_size[c]), fmt_float(np.mean(draws.accept_stat[c])),
               str(int(draws.divergent[c].sum())),
               str(int((draws.depth[c] >= draws.max_tree_depth).sum()))]
        row += [fmt_float(v) for v in draws.mass_diag[c]]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_chain_stats(path) -> tuple[np.ndarray, np.ndarray]:
    """``(step_size, mass_diag)`` from a chain statistics file."""
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return table[:, 1], table[:, 5:]

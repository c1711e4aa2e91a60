"""CSV ingestion with standardization, JSON configuration and the binary
model artifact.

Artifact layout (all integers little-endian)::

    b"GRIEFMDL"            8-byte magic
    uint64                 length of the JSON header in bytes
    JSON header            utf-8; format version, scalars, array table
    array payload          arrays back to back as '<f8' or '<i8', C order

The header's ``arrays`` list gives ``name``, ``dtype`` and ``shape`` for each
array in payload order.
"""

import csv
import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .basis import GridInducing, GriefBasis
from .errors import ConfigError, DimensionError
from .inference import SampleSet
from .kernels import BaseKernel1D, KernelFamily, ProductKernel
from .model import ModelState, SuffStats, Transform
from .tensor_algebra import Selection

logger = logging.getLogger(__name__)

MAGIC = b"GRIEFMDL"
FORMAT_VERSION = 1
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "?"})

__all__ = [
    "Standardizer",
    "Dataset",
    "read_table",
    "ingest_csv",
    "ModelArtifact",
    "save_model",
    "load_model",
    "Config",
    "load_config",
    "grief2_default_p",
]


# data -------------------------------------------------------------------------

@dataclass(frozen=True)
class Standardizer:
    """Per-column affine map ``z = (x - mean) / scale``."""

    mean: np.ndarray
    scale: np.ndarray

    def forward(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.mean

    @classmethod
    def fit(cls, data, names=None):
        data = np.asarray(data, dtype=float)
        mean = data.mean(axis=0)
        scale = data.std(axis=0)
        const = ~(scale > 0)
        if np.any(const):
            which = [names[i] if names else str(i) for i in np.flatnonzero(np.atleast_1d(const))]
            warnings.warn(f"constant column(s) {', '.join(which)}; scale set to 1", stacklevel=3)
            scale = np.where(const, 1.0, scale)
        return cls(np.asarray(mean, dtype=float), np.asarray(scale, dtype=float))


@dataclass
class Dataset:
    """Standardized inputs and targets plus the maps that undo it."""

    X: np.ndarray
    y: np.ndarray
    x_std: Standardizer
    y_std: Standardizer
    feature_names: list
    target_name: str
    n_rejected: int = 0

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]


def _is_missing(cell):
    return cell.strip().lower() in MISSING_TOKENS


def read_table(path, header=True):
    """Parse a numeric CSV.

    Returns ``(names, values, n_rejected)``; rows holding a missing cell are
    dropped and counted. Any other unparsable or non-finite cell raises a
    ``ValueError`` naming its line and column.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: file is empty")
    names = None
    start = 1
    if header:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
        start = 2
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(names) if names else len(rows[0])
    names = names or [f"x{i}" for i in range(width)]
    values, rejected = [], 0
    for k, row in enumerate(rows):
        line = start + k
        if len(row) != width:
            raise ValueError(f"{path}: line {line} has {len(row)} fields, expected {width}")
        if any(_is_missing(c) for c in row):
            rejected += 1
            continue
        parsed = []
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise ValueError(
                    f"{path}: non-numeric value {cell.strip()!r} at line {line}, column {j + 1}"
                    f" ({names[j]})"
                ) from None
            if not math.isfinite(v):
                raise ValueError(f"{path}: non-finite value at line {line}, column {j + 1}")
            parsed.append(v)
        values.append(parsed)
    if rejected:
        logger.info("%s: rejected %d row(s) with missing values", path, rejected)
    if not values:
        raise ValueError(f"{path}: every row has missing values")
    return names, np.array(values, dtype=float), rejected


def _target_index(names, target):
    if target is None:
        return len(names) - 1
    if isinstance(target, int) or (isinstance(target, str) and target.lstrip("-").isdigit()):
        idx = int(target)
        if not -len(names) <= idx < len(names):
            raise ValueError(f"target column {idx} out of range for {len(names)} columns")
        return idx % len(names)
    if target not in names:
        raise ValueError(f"target column {target!r} not found; columns are {names}")
    return names.index(target)


def ingest_csv(path, target=None, header=True) -> Dataset:
    """Load a CSV and standardize every column to zero mean, unit variance.

    Parameters
    ----------
    target : str or int, optional
        Column name (needs ``header``) or index; the last column by default.
    """
    names, values, rejected = read_table(path, header)
    if values.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a target")
    t = _target_index(names, target)
    feat = [j for j in range(len(names)) if j != t]
    fnames = [names[j] for j in feat]
    X, y = values[:, feat], values[:, t]
    x_std = Standardizer.fit(X, fnames)
    y_std = Standardizer.fit(y[:, None], [names[t]])
    y_std = Standardizer(float(y_std.mean[0]), float(y_std.scale[0]))
    return Dataset(x_std.forward(X), y_std.forward(y), x_std, y_std, fnames, names[t], rejected)


# config -----------------------------------------------------------------------

def grief2_default_p(n):
    """``min(1000, 10**floor(log10 n))``, at least 1."""
    if n < 1:
        return 1
    return max(1, min(1000, 10 ** int(math.floor(math.log10(n)))))


_FIELDS = {
    # name: (accepted types, default)
    "seed": (int, 0),
    "data": (str, None),
    "test_data": (str, None),
    "target": ((str, int), None),
    "header": (bool, True),
    "mode": (str, "grief2"),
    "mbar": (int, None),
    "p": (int, None),
    "kernel": (str, "squared_exponential"),
    "ard": (bool, True),
    "max_init_points": (int, 1000),
    "restarts": (int, 3),
    "max_iter": (int, 200),
    "iters": (int, 10000),
    "burn": (int, 1000),
    "thin": (int, 50),
    "step_size": ((int, float), 0.1),
    "model": (str, None),
    "out": (str, None),
    "draws": (str, None),
    "n_train": (int, None),
    "n_test": (int, None),
    "n": (int, None),
    "d": (int, None),
    "ps": (list, None),
    "nystrom_seeds": (int, 10),
    "lengthscale": ((int, float), None),
    "sigma2": ((int, float), None),
    "tol": ((int, float), 1e-8),
    "seeds": (list, None),
    "large_scale": (bool, False),
}


@dataclass
class Config:
    """Flat run configuration. Precedence: built-in defaults, then the JSON
    file, then command-line flags."""

    values: dict = field(default_factory=lambda: {k: v[1] for k, v in _FIELDS.items()})

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def updated(self, overrides):
        vals = dict(self.values)
        vals.update({k: v for k, v in overrides.items() if v is not None})
        cfg = Config(vals)
        cfg.validate()
        return cfg

    def validate(self):
        problems = []
        for key, val in self.values.items():
            if key not in _FIELDS:
                problems.append(f"{key}: unknown key")
                continue
            types = _FIELDS[key][0]
            if val is None:
                continue
            allowed = types if isinstance(types, tuple) else (types,)
            bad_bool = isinstance(val, bool) and bool not in allowed
            if bad_bool or not isinstance(val, types):
                problems.append(f"{key}: expected {_type_name(types)}, got {type(val).__name__}")
        v = self.values
        if isinstance(v.get("mode"), str) and v["mode"] not in ("grief2", "grief1"):
            problems.append(f"mode: must be 'grief2' or 'grief1', got {v['mode']!r}")
        if isinstance(v.get("kernel"), str) and v["kernel"] not in [k.value for k in KernelFamily]:
            problems.append(f"kernel: unsupported family {v['kernel']!r}")
        for key, low in (("mbar", 2), ("p", 1), ("iters", 1), ("burn", 0), ("thin", 1),
                         ("restarts", 1), ("max_iter", 1), ("max_init_points", 2),
                         ("n_train", 2), ("n_test", 0), ("n", 2), ("d", 1), ("nystrom_seeds", 1)):
            val = v.get(key)
            if isinstance(val, int) and not isinstance(val, bool) and val < low:
                problems.append(f"{key}: must be >= {low}, got {val}")
        for key in ("step_size", "tol", "lengthscale", "sigma2"):
            val = v.get(key)
            if isinstance(val, (int, float)) and not isinstance(val, bool) and not val > 0:
                problems.append(f"{key}: must be > 0, got {val}")
        it, burn = v.get("iters"), v.get("burn")
        if isinstance(it, int) and isinstance(burn, int) and burn >= it:
            problems.append(f"burn: must be smaller than iters ({burn} >= {it})")
        for key in ("ps", "seeds"):
            val = v.get(key)
            if isinstance(val, list) and not all(isinstance(x, int) and not isinstance(x, bool)
                                                 and x >= (1 if key == "ps" else 0) for x in val):
                problems.append(f"{key}: must be a list of non-negative integers")
        if problems:
            raise ConfigError(problems)


def _type_name(types):
    allowed = types if isinstance(types, tuple) else (types,)
    return " or ".join(t.__name__ for t in allowed)


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> Config:
    """Read a JSON config (if given), then apply non-``None`` overrides."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
        except OSError as exc:
            raise ConfigError([f"{path}: {exc.strerror or exc}"]) from None
        if not isinstance(doc, dict):
            raise ConfigError([f"{path}: top level must be a JSON object"])
    # every violated field is reported at once, whichever layer it came from
    return Config({**Config().values, **doc}).updated(overrides or {})


# artifact ---------------------------------------------------------------------

@dataclass
class ModelArtifact:
    """Everything needed to predict without the training data."""

    mode: str
    basis: GriefBasis
    stats: SuffStats
    state: ModelState
    n_train: int
    x_std: Standardizer
    y_std: Standardizer
    transform: Optional[Transform] = None
    samples: Optional[SampleSet] = None
    feature_names: list = field(default_factory=list)
    target_name: str = "y"
    metadata: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.basis.d


def _arrays(art: ModelArtifact):
    b = art.basis
    out = {
        "lengthscales": np.array([k.lengthscale for k in b.kernel.dims]),
        "amplitudes": np.array([k.amplitude for k in b.kernel.dims]),
        "index_table": b.selection.index_table,
        "log_values": b.selection.log_values,
        "col_index": b.col_index,
        "r": art.stats.r,
        "w": art.state.w,
        "x_mean": np.atleast_1d(art.x_std.mean),
        "x_scale": np.atleast_1d(art.x_std.scale),
        "y_mean": np.atleast_1d(art.y_std.mean),
        "y_scale": np.atleast_1d(art.y_std.scale),
    }
    for i, a in enumerate(b.grid.axes):
        out[f"axis_{i}"] = a
    for i, c in enumerate(b.columns):
        out[f"columns_{i}"] = c
    if art.stats.A is not None:
        out["A"] = art.stats.A
    if art.transform is not None:
        out["V"] = art.transform.V
        out["Sigma"] = art.transform.Sigma
    if art.samples is not None:
        out["samples_w"] = art.samples.w
        out["samples_sigma2"] = art.samples.sigma2
    return out


def save_model(art: ModelArtifact, path):
    arrays = _arrays(art)
    table, payload = [], []
    for name, a in arrays.items():
        a = np.asarray(a)
        dtype = "<i8" if np.issubdtype(a.dtype, np.integer) else "<f8"
        a = np.ascontiguousarray(a, dtype=dtype)
        table.append({"name": name, "dtype": dtype, "shape": list(a.shape)})
        payload.append(a.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "mode": art.mode,
        "family": art.basis.kernel.dims[0].family.value,
        "d": art.d,
        "p": art.stats.p,
        "n_train": art.n_train,
        "yty": art.stats.yty,
        "orthogonal": art.stats.orthogonal,
        "effective_p": art.stats.effective_p,
        "sigma2": art.state.sigma2,
        "degenerate": list(art.basis.grid.degenerate),
        "feature_names": list(art.feature_names),
        "target_name": art.target_name,
        "samples": None if art.samples is None else {
            "acceptance_rate": art.samples.acceptance_rate,
            "step_size": art.samples.step_size,
        },
        "metadata": art.metadata,
        "arrays": table,
    }
    # repr of a float round-trips exactly through JSON
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def load_model(path) -> ModelArtifact:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode())
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 16 + hlen
    arr = {}
    for spec in header["arrays"]:
        count = math.prod(spec["shape"])
        nbytes = 8 * count
        if pos + nbytes > len(raw):
            raise ValueError(f"{path}: truncated payload at array {spec['name']!r}")
        a = np.frombuffer(raw, dtype=spec["dtype"], count=count, offset=pos)
        arr[spec["name"]] = a.reshape(spec["shape"]).astype(a.dtype.newbyteorder("="))
        pos += nbytes
    d = header["d"]
    family = KernelFamily(header["family"])
    kernel = ProductKernel(tuple(
        BaseKernel1D(float(l), float(a), family)
        for l, a in zip(arr["lengthscales"], arr["amplitudes"])
    ))
    grid = GridInducing(tuple(arr[f"axis_{i}"] for i in range(d)), tuple(header["degenerate"]))
    selection = Selection(arr["index_table"], arr["log_values"])
    columns = tuple(arr[f"columns_{i}"] for i in range(d))
    basis = GriefBasis(grid, kernel, selection, columns, arr["col_index"],
                       np.empty((0, selection.p)))
    stats = SuffStats(header["yty"], arr["r"], arr.get("A"), header["orthogonal"],
                      header["effective_p"])
    state = ModelState(arr["w"], header["sigma2"])
    transform = Transform(arr["V"], arr["Sigma"]) if "V" in arr else None
    samples = None
    if header["samples"] is not None:
        info = header["samples"]
        samples = SampleSet(arr["samples_w"], arr["samples_sigma2"], info["acceptance_rate"],
                            np.empty(0), info["step_size"])
    y_std = Standardizer(float(arr["y_mean"][0]), float(arr["y_scale"][0]))
    return ModelArtifact(
        header["mode"], basis, stats, state, header["n_train"],
        Standardizer(arr["x_mean"], arr["x_scale"]), y_std, transform, samples,
        header["feature_names"], header["target_name"], header["metadata"],
    )


def check_features(art: ModelArtifact, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != art.d:
        got = X.shape[1] if X.ndim == 2 else X.ndim
        raise DimensionError(f"inputs have {got} features, model expects d={art.d}")
    return X

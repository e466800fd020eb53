"""File formats: multi-model PDB, binary feature/parameter files, run config, reports."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io as _io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from featflow.errors import ConfigError, FormatError, InvalidInputError, ParseError
from featflow.geometry import AtomRecord
from featflow.metrics import TABLE_FIELDS, AggregateReport, Ensemble, EvalConfig, MetricReport
from featflow.prior import DEFAULT_ALPHA

# --------------------------------------------------------------------------- PDB


@dataclass
class PdbModel:
    model_number: int
    atoms: list[AtomRecord] = field(default_factory=list)
    chain_id: str = "A"

    def residue_indices(self) -> list[int]:
        return list(dict.fromkeys(a.residue_index for a in self.atoms))


def _field_float(line: str, lo: int, hi: int, lineno: int, what: str) -> float:
    text = line[lo:hi]
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"malformed {what} field {text!r}", lineno) from None


def parse_pdb(data: bytes | str) -> list[PdbModel]:
    """Parse ATOM records into models; HETATM and alternate locations other than A are skipped."""
    if isinstance(data, bytes):
        data = data.decode("ascii", errors="replace")
    models: list[PdbModel] = []
    current: PdbModel | None = None
    implicit = False
    for lineno, raw in enumerate(data.splitlines(), start=1):
        line = raw.rstrip()
        rec = line[:6].strip()
        if rec == "MODEL":
            try:
                number = int(line[6:].split()[0])
            except (IndexError, ValueError):
                raise ParseError("malformed MODEL record", lineno) from None
            current = PdbModel(number)
            models.append(current)
            implicit = False
        elif rec == "ENDMDL":
            current = None
        elif rec == "ATOM":
            if len(line) < 54:
                raise ParseError("ATOM record shorter than the coordinate columns", lineno)
            alt = line[16]
            if alt not in (" ", "A"):
                continue
            if current is None:
                if implicit and models:
                    current = models[-1]
                else:
                    current = PdbModel(len(models) + 1)
                    models.append(current)
                    implicit = True
            try:
                resi = int(line[22:26])
            except ValueError:
                raise ParseError(f"malformed residue number {line[22:26]!r}", lineno) from None
            pos = (_field_float(line, 30, 38, lineno, "x"),
                   _field_float(line, 38, 46, lineno, "y"),
                   _field_float(line, 46, 54, lineno, "z"))
            current.chain_id = line[21]
            current.atoms.append(AtomRecord(resi, line[17:20].strip(), line[12:16].strip(), pos))
    return [m for m in models if m.atoms]


def _atom_name_field(name: str) -> str:
    if len(name) >= 4:
        return name[:4]
    return f" {name:<3}"


def _coord_field(v: float) -> str:
    s = f"{v:8.3f}"
    if len(s) > 8:
        raise FormatError(f"coordinate {v} does not fit the 8-column PDB field")
    return s


def write_pdb(models: Sequence[PdbModel]) -> bytes:
    """Serialize models; MODEL numbers are rewritten sequentially from 1."""
    out = _io.StringIO()
    for k, model in enumerate(models, start=1):
        out.write(f"MODEL     {k:>4}\n")
        for serial, a in enumerate(model.atoms, start=1):
            x, y, z = (_coord_field(v) for v in a.position)
            element = a.atom_name.lstrip("0123456789")[:1]
            out.write(
                f"ATOM  {serial % 100000:>5} {_atom_name_field(a.atom_name)} {a.residue_name:>3} "
                f"{model.chain_id[:1]}{a.residue_index:>4}    {x}{y}{z}  1.00  0.00          {element:>2}\n"
            )
        out.write("ENDMDL\n")
    out.write("END\n")
    return out.getvalue().encode("ascii")


def extract_flow_coords(model: PdbModel) -> np.ndarray:
    """CB per residue, CA for residues without CB (glycine)."""
    residues: dict[int, dict[str, AtomRecord]] = {}
    for a in model.atoms:
        residues.setdefault(a.residue_index, {})[a.atom_name] = a
    out = []
    for resi, atoms in residues.items():
        pick = atoms.get("CB") or atoms.get("CA")
        if pick is None:
            raise InvalidInputError(f"residue {resi} has neither CB nor CA")
        out.append(pick.position)
    return np.array(out, dtype=np.float64)


def extract_metric_coords(model: PdbModel) -> np.ndarray:
    """CA per residue; coarse-grained residues that only carry CB fall back to it."""
    residues: dict[int, dict[str, AtomRecord]] = {}
    for a in model.atoms:
        residues.setdefault(a.residue_index, {})[a.atom_name] = a
    out = []
    for resi, atoms in residues.items():
        pick = atoms.get("CA") or atoms.get("CB")
        if pick is None:
            raise InvalidInputError(f"residue {resi} has neither CA nor CB")
        out.append(pick.position)
    return np.array(out, dtype=np.float64)


def models_to_ensemble(models: Sequence[PdbModel], target_id: str = "target",
                       stride: int = 1) -> Ensemble:
    from featflow.denoiser import sequence_from_atoms

    if not models:
        raise InvalidInputError("no models with ATOM records")
    models = list(models)[::stride]
    frames = [extract_metric_coords(m) for m in models]
    if len({f.shape for f in frames}) != 1:
        raise InvalidInputError("models have different residue counts")
    return Ensemble(np.stack(frames), [list(m.atoms) for m in models], target_id,
                    sequence_from_atoms(models[0].atoms))


def ensemble_to_models(e: Ensemble, chain_id: str = "A") -> list[PdbModel]:
    from featflow.denoiser import THREE_LETTER

    if e.atoms is not None:
        return [PdbModel(k + 1, list(a), chain_id) for k, a in enumerate(e.atoms)]
    seq = e.sequence or "X" * e.n_residues
    names = [THREE_LETTER.get(c.upper(), "UNK") for c in seq]
    models = []
    for k, frame in enumerate(e.frames):
        atoms = [AtomRecord(i + 1, names[i], "CA" if names[i] == "GLY" else "CB",
                            tuple(float(v) for v in frame[i])) for i in range(e.n_residues)]
        models.append(PdbModel(k + 1, atoms, chain_id))
    return models


def read_ensemble(path, target_id: str | None = None, stride: int = 1) -> Ensemble:
    path = Path(path)
    return models_to_ensemble(parse_pdb(path.read_bytes()), target_id or path.stem, stride)


def read_flow_ensemble(path, target_id: str | None = None, stride: int = 1) -> Ensemble:
    """Like :func:`read_ensemble` but with flow coordinates (CB, CA for glycine) as frames."""
    path = Path(path)
    e = read_ensemble(path, target_id, stride)
    models = parse_pdb(path.read_bytes())[::stride]
    return Ensemble(np.stack([extract_flow_coords(m) for m in models]), e.atoms,
                    e.target_id, e.sequence)


def write_ensemble(e: Ensemble, path) -> None:
    Path(path).write_bytes(write_pdb(ensemble_to_models(e)))


# --------------------------------------------------------------------------- binary formats

FEATURE_MAGIC = b"EFLF"
PARAM_MAGIC = b"EFLP"
FORMAT_VERSION = 1


def write_features(path, single, pair) -> None:
    single = np.ascontiguousarray(np.asarray(single), dtype="<f4")
    pair = np.ascontiguousarray(np.asarray(pair), dtype="<f4")
    n, c_s = single.shape
    if pair.shape[:2] != (n, n):
        raise InvalidInputError(f"pair shape {pair.shape} inconsistent with {n} residues")
    header = FEATURE_MAGIC + struct.pack("<4I", FORMAT_VERSION, n, c_s, pair.shape[2])
    Path(path).write_bytes(header + single.tobytes() + pair.tobytes())


def decode_features(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) < 20:
        raise FormatError("feature file shorter than its 20-byte header", len(buf))
    if buf[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, n, c_s, c_z = struct.unpack_from("<4I", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = 4 * (n * c_s + n * n * c_z)
    if len(buf) - 20 != expected:
        raise FormatError(
            f"payload has {len(buf) - 20} bytes, header implies {expected}", 20 + min(expected, len(buf) - 20))
    single = np.frombuffer(buf, dtype="<f4", count=n * c_s, offset=20).reshape(n, c_s)
    pair = np.frombuffer(buf, dtype="<f4", offset=20 + 4 * n * c_s).reshape(n, n, c_z)
    return single.astype(np.float32), pair.astype(np.float32)


def read_features(path) -> tuple[np.ndarray, np.ndarray]:
    return decode_features(Path(path).read_bytes())


def encode_params(tensors: Mapping[str, object]) -> bytes:
    out = [PARAM_MAGIC, struct.pack("<2I", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if hasattr(value, "detach") else np.asarray(value)
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_params(buf: bytes) -> dict[str, np.ndarray]:
    def need(offset: int, size: int) -> None:
        if offset + size > len(buf):
            raise FormatError("parameter file truncated", offset)

    need(0, 12)
    if buf[:4] != PARAM_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, count = struct.unpack_from("<2I", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(pos, 4)
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(pos, name_len)
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        need(pos, 4)
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(pos, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) * 4
        need(pos, size)
        out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += size
    if pos != len(buf):
        raise FormatError("trailing bytes after the last tensor", pos)
    return out


def save_params(path, tensors: Mapping[str, object]) -> None:
    Path(path).write_bytes(encode_params(tensors))


def load_params(path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())


def save_model(path, embedder, denoiser, meta: Mapping[str, int] | None = None) -> None:
    """Store embedder and denoiser state (prefixed ``embedder.`` / ``denoiser.``)."""
    import torch

    tensors: dict[str, object] = {}
    for prefix, module in (("embedder", embedder), ("denoiser", denoiser)):
        for k, v in module.state_dict().items():
            tensors[f"{prefix}.{k}"] = v
    for k, v in (meta or {}).items():
        tensors[f"meta.{k}"] = torch.tensor([float(v)])
    save_params(path, tensors)


def load_model(path):
    """Rebuild (embedder, denoiser) from a file written by :func:`save_model`."""
    import torch

    from featflow.denoiser import ToyDenoiser
    from featflow.features import InputEmbedder

    tensors = load_params(path)
    meta = {k[5:]: int(v[0]) for k, v in tensors.items() if k.startswith("meta.")}
    emb_state = {k[9:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("embedder.")}
    den_state = {k[9:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("denoiser.")}
    try:
        c_s = den_state["single_in.weight"].shape[1]
        width = den_state["single_in.weight"].shape[0]
        c_z = den_state["pair_norm.weight"].shape[0]
    except KeyError as exc:
        raise FormatError(f"parameter file lacks tensor {exc}") from None
    n_rounds = meta.get("n_rounds", len({k.split(".")[1] for k in den_state if k.startswith("rounds.")}))
    n_blocks = meta.get("embed_blocks", len({k.split(".")[2] for k in emb_state
                                             if k.startswith("pair_stack.blocks.")}))
    embedder = InputEmbedder(c_s=c_s, c_z_out=c_z, n_blocks=n_blocks)
    denoiser = ToyDenoiser(c_s=c_s, c_z=c_z, width=width, n_rounds=n_rounds)
    embedder.load_state_dict(emb_state)
    denoiser.load_state_dict(den_state)
    return embedder.eval(), denoiser.eval()


# --------------------------------------------------------------------------- config


@dataclass
class RunConfig:
    # [flow]
    n_steps: int = 10
    n_samples: int = 250
    embed_angles: bool = False
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    # [target]
    sequence: str = "ACDEFGHIKLMNPQRS"
    target_id: str = "target"
    # [provider]
    provider: str = "synthetic"
    provider_seed: int = 0
    feature_path: str = ""
    c_s: int = 64
    c_z: int = 64
    # [model]
    params: str = ""
    width: int = 32
    n_rounds: int = 4
    embed_blocks: int = 4
    # [train]
    train_data: str = ""
    train_steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    time_weighted: bool = True
    lr_schedule: str = "constant"
    stride: int = 1
    # [metrics]
    contact_threshold: float = 7.0
    persistence: float = 0.85
    min_sep: int = 3
    pca_bins: int = 50
    dihedral_bins: int = 36
    max_pairs: int = 5000
    metric_seed: int = 0
    # [benchmark]
    lengths: str = "32,64,128"
    repetitions: int = 3

    def eval_config(self) -> EvalConfig:
        return EvalConfig(max_pairs=self.max_pairs, seed=self.metric_seed,
                          contact_threshold=self.contact_threshold, persistence=self.persistence,
                          min_sep=self.min_sep, pca_bins=self.pca_bins,
                          dihedral_bins=self.dihedral_bins)


_SECTIONS = {
    "flow": ("n_steps", "n_samples", "embed_angles", "alpha", "seed"),
    "target": ("sequence", "target_id"),
    "provider": ("provider", "provider_seed", "feature_path", "c_s", "c_z"),
    "model": ("params", "width", "n_rounds", "embed_blocks"),
    "train": ("train_data", "train_steps", "batch_size", "lr", "time_weighted", "lr_schedule",
              "stride"),
    "metrics": ("contact_threshold", "persistence", "min_sep", "pca_bins", "dihedral_bins",
                "max_pairs", "metric_seed"),
    "benchmark": ("lengths", "repetitions"),
}

_RANGES = {
    "n_steps": lambda v: v >= 1,
    "n_samples": lambda v: v >= 1,
    "alpha": lambda v: v > 0,
    "sequence": lambda v: len(v) >= 1,
    "provider": lambda v: v in ("synthetic", "file"),
    "c_s": lambda v: v >= 1,
    "c_z": lambda v: v >= 1,
    "width": lambda v: v >= 1,
    "n_rounds": lambda v: v >= 1,
    "embed_blocks": lambda v: v >= 0,
    "train_steps": lambda v: v >= 0,
    "batch_size": lambda v: v >= 1,
    "lr": lambda v: v > 0,
    "lr_schedule": lambda v: v in ("constant", "cosine"),
    "stride": lambda v: v >= 1,
    "contact_threshold": lambda v: v > 0,
    "persistence": lambda v: 0 <= v < 1,
    "min_sep": lambda v: v >= 1,
    "pca_bins": lambda v: v >= 2,
    "dihedral_bins": lambda v: v >= 2,
    "max_pairs": lambda v: v >= 1,
    "repetitions": lambda v: v >= 3,
}


def _convert(name: str, kind: type, text: str):
    try:
        if kind is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text.strip())
    except ValueError:
        raise ConfigError(name, f"cannot parse {text!r} as {kind.__name__}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(key, f"unknown key in section [{section}]")
            value = _convert(key, kinds[types[key]], raw)
            check = _RANGES.get(key)
            if check is not None and not check(value):
                raise ConfigError(key, f"value {value!r} out of range")
            values[key] = value
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            v = getattr(cfg, key)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(format_config(cfg))


# --------------------------------------------------------------------------- reports


def _csv_value(v) -> str:
    return "" if v is None else repr(float(v))


def report_rows_csv(reports: Iterable[MetricReport]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target_id", *TABLE_FIELDS])
    for r in reports:
        w.writerow([r.target_id, *(_csv_value(getattr(r, k)) for k in TABLE_FIELDS)])
    return buf.getvalue()


def save_report(report: MetricReport, path) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.csv`` next to ``path``."""
    path = Path(path)
    js, cs = path.with_suffix(".json"), path.with_suffix(".csv")
    js.write_text(json.dumps(report.to_dict(), indent=2))
    cs.write_text(report_rows_csv([report]))
    return js, cs


def load_report(path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text()))


#: Row labels of the published results table, mapped to report fields.
TABLE_ROWS = (
    ("Pairwise RMSD", "pairwise_rmsd"),
    ("Pairwise RMSD (reference)", "pairwise_rmsd_ref"),
    ("Pairwise RMSD p", "pairwise_rmsd_pearson"),
    ("PCA CA coordinates JSD", "pca_jsd_coords"),
    ("PCA CA pairwise distance JSD", "pca_jsd_pairdist"),
    ("Per-target RMSF", "rmsf_mean"),
    ("Per-target RMSF (reference)", "rmsf_mean_ref"),
    ("Per-target RMSF p", "rmsf_pearson"),
    ("Stable contacts (Jaccard)", "contact_jaccard"),
    ("Dihedral distributions JSD", "dihedral_jsd"),
    ("DCCM p", "dccm_pearson"),
)


def table_csv(columns: Mapping[str, AggregateReport]) -> str:
    """One row per metric, one column per method/run (medians across targets)."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", *columns.keys()])
    for label, key in TABLE_ROWS:
        row = [label]
        for agg in columns.values():
            v = agg.pairwise_rmsd_pearson if key == "pairwise_rmsd_pearson" else agg.medians.get(key)
            row.append(_csv_value(v))
        w.writerow(row)
    return buf.getvalue()


def save_aggregate(agg: AggregateReport, path) -> tuple[Path, Path]:
    path = Path(path)
    js, cs = path.with_suffix(".json"), path.with_suffix(".csv")
    js.write_text(json.dumps(agg.to_dict(), indent=2))
    cs.write_text(table_csv({"value": agg}))
    return js, cs

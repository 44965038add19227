"""Static parameter, MAC and storage accounting over a :class:`ModelGraph`.

FLOPs are reported as multiply-accumulate counts (one multiply-add = one
FLOP). Normalizations, activations, pooling and the token shift count as
zero. When a built :class:`Model` is passed, every closed-form parameter
count is cross-checked against the scalars actually allocated.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .errors import ConsistencyError, UsageError
from .fire import FireConfig
from .gmlp import GmlpConfig
from .models import LayerSpec, Model, ModelGraph

FLOP_CONVENTION = "FLOPs are multiply-accumulate counts (1 MAC = 1 FLOP); norms, activations and pooling excluded"
CSV_COLUMNS = ("layer", "out_n", "out_c", "out_h", "out_w", "params", "macs")


def gmlp_params(cfg: GmlpConfig) -> int:
    d = cfg.d_model
    total = 2 * d if cfg.block_norm else 0
    total += d * d + (d if cfg.bias_uv else 0)
    if cfg.gating:
        w = d // 2 if cfg.split == "half" else d
        total += 2 * w if cfg.inner_norm else 0
        if cfg.spatial_mixing == "dense":
            total += cfg.n_tokens * cfg.n_tokens + cfg.n_tokens
    total += cfg.gate_width * d + (d if cfg.bias_uv else 0)
    return total


def fire_params(cfg: FireConfig) -> int:
    return (cfg.c_in * cfg.s + 2 * cfg.s + cfg.s * cfg.e1 + 2 * cfg.e1
            + 9 * cfg.s * cfg.e3 + 2 * cfg.e3)


def node_params(spec: LayerSpec) -> int:
    c = spec.config
    if spec.kind == "conv":
        return c["kernel"] ** 2 * c["c_in"] * c["c_out"]
    if spec.kind == "conv_norm_act":
        return c["kernel"] ** 2 * c["c_in"] * c["c_out"] + 2 * c["c_out"]
    if spec.kind == "group_norm":
        return 2 * c["groups"]
    if spec.kind == "batchnorm":
        return 2 * c["channels"]
    if spec.kind == "gmlp":
        return gmlp_params(c["gmlp"])
    if spec.kind == "fire":
        return fire_params(c["fire"])
    return 0


def node_macs(spec: LayerSpec) -> int:
    c = spec.config
    _, h, w = spec.out_shape
    hw = h * w
    if spec.kind in ("conv", "conv_norm_act"):
        return c["kernel"] ** 2 * c["c_in"] * c["c_out"] * hw
    if spec.kind == "gmlp":
        cfg: GmlpConfig = c["gmlp"]
        d = cfg.d_model
        macs = hw * (d * d + cfg.gate_width * d)
        if cfg.gating and cfg.spatial_mixing == "dense":
            macs += hw * hw * cfg.gate_width
        return macs
    if spec.kind == "fire":
        f: FireConfig = c["fire"]
        return hw * (f.c_in * f.s + f.s * f.e1 + 9 * f.s * f.e3)
    return 0


@dataclass(frozen=True)
class CostRow:
    layer: str
    out_shape: tuple[int, int, int]
    params: int
    macs: int


@dataclass
class CostReport:
    rows: list[CostRow]
    title: str = field(default="", compare=False)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def storage_bytes(self) -> int:
        return 4 * self.total_params

    @property
    def size_mib(self) -> float:
        return self.storage_bytes / 2 ** 20

    @property
    def size_mb(self) -> float:
        return self.storage_bytes / 1e6

    def row(self, name: str) -> CostRow:
        for r in self.rows:
            if r.layer == name:
                return r
        raise KeyError(name)


def _graph_of(model) -> ModelGraph:
    return model.graph if isinstance(model, Model) else model


def _title(graph: ModelGraph) -> str:
    c, h, w = graph.input_shape
    bits = [graph.name]
    if graph.preset != "-":
        bits.append(f"preset={graph.preset}")
    if str(graph.ablation) != "full":
        bits.append(f"ablation={graph.ablation}")
    return f"{' '.join(bits)} input={c}x{h}x{w} classes={graph.classes}"


def count_params(model) -> list[CostRow]:
    """Per-layer closed-form counts; cross-checked if ``model`` is built."""
    graph = _graph_of(model)
    rows = [CostRow(s.name, s.out_shape, node_params(s), 0) for s in graph.layers]
    if isinstance(model, Model):
        for row, (name, layer) in zip(rows, model.named_layers()):
            allocated = layer.num_params()
            if allocated != row.params:
                raise ConsistencyError(f"{name}: formula gives {row.params} parameters, "
                                       f"layer allocates {allocated}")
    return rows


def count_macs(model) -> list[CostRow]:
    graph = _graph_of(model)
    return [CostRow(s.name, s.out_shape, 0, node_macs(s)) for s in graph.layers]


def cost_report(model) -> CostReport:
    graph = _graph_of(model)
    params = count_params(model)
    macs = count_macs(graph)
    rows = [CostRow(p.layer, p.out_shape, p.params, m.macs) for p, m in zip(params, macs)]
    return CostReport(rows, title=_title(graph))


def storage_size(model_or_report) -> dict:
    """Raw single-precision weight storage: 4 bytes per parameter."""
    if isinstance(model_or_report, CostReport):
        report = model_or_report
    else:
        report = CostReport(count_params(model_or_report))
    return {"bytes": report.storage_bytes, "mib": report.size_mib, "mb": report.size_mb}


def _fmt_shape(shape) -> str:
    c, h, w = shape
    return f"{h}x{w}x{c}"


def _as_text(report: CostReport) -> str:
    lines = []
    if report.title:
        lines.append(f"# {report.title}")
    lines.append(f"# {FLOP_CONVENTION}")
    lines.append(f"{'layer':<12} {'output size':>14} {'parameters':>12} {'MACs':>14}")
    for r in report.rows:
        params = f"{r.params:,}" if r.params else "-"
        macs = f"{r.macs:,}" if r.macs else "-"
        lines.append(f"{r.layer:<12} {_fmt_shape(r.out_shape):>14} {params:>12} {macs:>14}")
    lines.append(f"FLOPs (M, as MACs): {report.total_macs / 1e6:.1f}")
    lines.append(f"size: {report.storage_bytes:,} bytes = {report.size_mib:.2f} MiB = {report.size_mb:.2f} MB")
    lines.append(f"{'total':<12} {'':>14} {report.total_params:>12,} {report.total_macs:>14,}")
    return "\n".join(lines) + "\n"


def _as_csv(report: CostReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.rows:
        c, h, w = r.out_shape
        writer.writerow([r.layer, 1, c, h, w, r.params, r.macs])
    return buf.getvalue()


def _as_json(report: CostReport) -> str:
    payload = {
        "title": report.title,
        "flop_convention": FLOP_CONVENTION,
        "rows": [dict(asdict(r), out_shape=list(r.out_shape)) for r in report.rows],
        "total_params": report.total_params,
        "total_macs": report.total_macs,
        "storage_bytes": report.storage_bytes,
        "size_mib": report.size_mib,
        "size_mb": report.size_mb,
    }
    return json.dumps(payload, indent=2) + "\n"


_EMITTERS = {"text": _as_text, "csv": _as_csv, "json": _as_json}


def emit_summary(report: CostReport, fmt: str = "text") -> str:
    try:
        return _EMITTERS[fmt](report)
    except KeyError:
        raise UsageError(f"unknown summary format {fmt!r}; choose from {sorted(_EMITTERS)}") from None


def parse_csv(text: str) -> CostReport:
    """Inverse of ``emit_summary(report, 'csv')``; ``#`` lines are skipped."""
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise UsageError(f"unexpected CSV header {reader.fieldnames}")
    rows = [CostRow(r["layer"], (int(r["out_c"]), int(r["out_h"]), int(r["out_w"])),
                    int(r["params"]), int(r["macs"])) for r in reader]
    return CostReport(rows)


def parse_json(text: str) -> CostReport:
    payload = json.loads(text)
    rows = [CostRow(r["layer"], tuple(r["out_shape"]), r["params"], r["macs"]) for r in payload["rows"]]
    return CostReport(rows, title=payload.get("title", ""))

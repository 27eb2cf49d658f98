"""Command-line surface: build libraries, query plans, run evaluations,
drive streams.

Exit codes: 0 success, 2 usage error, 3 structural/data error, 4 numeric
failure.  Every report carries a header block with the format version, the
library digest, and the full effective configuration, and repeated
invocations with the same inputs produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench as bench_mod
from .errors import AdapterFuseError, StructuralError, UsageError
from .fusion import FusionConfig, FusedAdapter, fuse, plan_report
from .library import (
    FORMAT_VERSION,
    Embedding,
    Library,
    build_record,
    extend,
    library_digest,
    load,
    read_embeddings_file,
    save,
)
from .metrics import (
    ContributionMatrix,
    contribution_csv,
    contribution_matrix,
    correlation_csv,
    distance_performance_correlation,
    metric_table_csv,
    render_csv,
)
from .stream import batch_cluster_fuse, run_stream
from .tensor import AdapterSet, LoraPair, Matrix


def _config_from_args(args) -> FusionConfig:
    return FusionConfig(
        top_k=args.top_k,
        temperature=args.tau,
        distance_metric=args.metric,
        normalize_query=args.normalize,
    )


def _add_fusion_flags(sub) -> None:
    sub.add_argument("--top-k", type=int, default=7)
    sub.add_argument("--tau", type=float, default=0.01)
    sub.add_argument(
        "--metric",
        choices=("euclidean", "cosine", "mahalanobis"),
        default="euclidean",
    )
    sub.add_argument("--normalize", action="store_true")


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------


def _read_stub(path: Path) -> dict:
    if not path.is_file():
        raise UsageError(f"stub file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StructuralError(f"unreadable stub {path}: {exc}") from exc


def _parse_adapter_blob(
    domain_id: str, raw: bytes, layers: list[dict], rank: int, alpha: float
) -> AdapterSet:
    expected = sum(
        4 * (layer["rows"] * rank + rank * layer["cols"]) for layer in layers
    )
    if len(raw) != expected:
        raise StructuralError(
            f"domain {domain_id}: adapter blob holds {len(raw)} bytes but the "
            f"declared shapes at rank {rank} need {expected}"
        )
    pairs = []
    offset = 0
    for layer in layers:
        rows, cols = layer["rows"], layer["cols"]
        b_count = rows * rank
        a_count = rank * cols
        b = np.frombuffer(raw, "<f4", b_count, offset).astype(np.float64)
        offset += 4 * b_count
        a = np.frombuffer(raw, "<f4", a_count, offset).astype(np.float64)
        offset += 4 * a_count
        pairs.append(
            LoraPair(
                layer["name"],
                Matrix(b.reshape(rows, rank)),
                Matrix(a.reshape(rank, cols)),
                rank,
                alpha,
            )
        )
    return AdapterSet(adapter_id=f"adapter_{domain_id}", layers=tuple(pairs))


def cmd_build(args) -> None:
    stub_path = Path(args.stub)
    stub = _read_stub(stub_path)
    base = stub_path.parent
    try:
        embedding_dim = stub["embedding_dim"]
        rank = stub["rank"]
        alpha = stub["alpha"]
        layers = stub["layers"]
        domains = stub["domains"]
    except KeyError as exc:
        raise StructuralError(f"stub {stub_path} is missing field {exc}") from exc

    lib = Library(records=(), embedding_dim=embedding_dim)
    for entry in domains:
        domain_id = entry.get("domain_id", "<unnamed>")
        emb_path = base / entry["embeddings"]
        blob_path = base / entry["adapter_blob"]
        for p in (emb_path, blob_path):
            if not p.is_file():
                raise UsageError(f"domain {domain_id}: input file not found: {p}")
        embeddings = read_embeddings_file(emb_path)
        if embeddings[0].dim != embedding_dim:
            raise StructuralError(
                f"domain {domain_id}: embeddings have dim {embeddings[0].dim}, "
                f"stub declares {embedding_dim}"
            )
        adapter = _parse_adapter_blob(
            domain_id, blob_path.read_bytes(), layers, rank, alpha
        )
        lib = extend(lib, build_record(domain_id, embeddings, adapter))

    save(lib, args.out)
    print(f"library: {args.out}")
    print(f"records: {lib.size}")
    print(f"embedding_dim: {lib.embedding_dim}")
    for record in lib.records:
        print(f"  {record.domain_id}: samples={record.sample_count}")


# ---------------------------------------------------------------------------
# query
# ---------------------------------------------------------------------------


def _single_embedding(path: str) -> Embedding:
    embeddings = read_embeddings_file(path)
    if len(embeddings) != 1:
        raise UsageError(
            f"{path} holds {len(embeddings)} embeddings; query expects exactly one"
        )
    return embeddings[0]


def _fused_blob(fused: FusedAdapter, layer_order: Sequence[str]) -> bytes:
    chunks = []
    for name in layer_order:
        layer = fused.layers[name]
        chunks.append(np.ascontiguousarray(layer.B_fused.data, "<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.A_fused.data, "<f4").tobytes())
    return b"".join(chunks)


def cmd_query(args) -> None:
    lib = load(args.library)
    config = _config_from_args(args)
    query = _single_embedding(args.embedding)
    fused = fuse(query, lib, config)
    print(json.dumps(plan_report(fused.plan, config), indent=2, sort_keys=True))
    if args.merge_out:
        Path(args.merge_out).write_bytes(_fused_blob(fused, lib.layer_order))


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_PALETTE = (
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
    "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
)


def _svg_open(width: int, height: int, title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="16" y="24" font-family="sans-serif" font-size="16" '
        f'fill="#222222">{title}</text>',
    ]


def _heatmap_svg(result) -> str:
    cell = 72
    left, top = 90, 60
    rows, cols = result.h_means.shape
    width = left + cols * cell + 20
    height = top + rows * cell + 40
    lo = float(result.h_means.min())
    hi = float(result.h_means.max())
    span = hi - lo if hi > lo else 1.0
    parts = _svg_open(width, height, "fusion h-mean over top_k and temperature")
    best = result.argmax_cell()
    for i in range(rows):
        for j in range(cols):
            value = float(result.h_means[i, j])
            t = (value - lo) / span
            # light straw to deep teal
            r = round(244 - t * (244 - 23))
            g = round(241 - t * (241 - 106))
            b = round(222 - t * (222 - 114))
            x = left + j * cell
            y = top + i * cell
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({r},{g},{b})" stroke="#ffffff"/>'
            )
            if (i, j) == tuple(best):
                parts.append(
                    f'<rect x="{x + 2}" y="{y + 2}" width="{cell - 4}" '
                    f'height="{cell - 4}" fill="none" stroke="#d62728" '
                    f'stroke-width="2"/>'
                )
            shade = "#ffffff" if t > 0.6 else "#222222"
            parts.append(
                f'<text x="{x + cell // 2}" y="{y + cell // 2 + 5}" '
                f'text-anchor="middle" font-family="monospace" font-size="12" '
                f'fill="{shade}">{value:.3f}</text>'
            )
    for i, k in enumerate(result.k_values):
        parts.append(
            f'<text x="{left - 10}" y="{top + i * cell + cell // 2 + 5}" '
            f'text-anchor="end" font-family="monospace" font-size="12" '
            f'fill="#222222">K={k}</text>'
        )
    for j, tau in enumerate(result.tau_values):
        parts.append(
            f'<text x="{left + j * cell + cell // 2}" y="{top - 12}" '
            f'text-anchor="middle" font-family="monospace" font-size="12" '
            f'fill="#222222">{tau:g}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _pie_slices(fractions: Sequence[tuple[str, float]], cx: float, cy: float, radius: float):
    angle = -0.5 * math.pi
    for label, fraction in fractions:
        if fraction <= 0:
            continue
        if fraction >= 0.999999:
            yield label, f'<circle cx="{cx}" cy="{cy}" r="{radius}"'
            continue
        end = angle + 2 * math.pi * fraction
        x0 = cx + radius * math.cos(angle)
        y0 = cy + radius * math.sin(angle)
        x1 = cx + radius * math.cos(end)
        y1 = cy + radius * math.sin(end)
        large = 1 if fraction > 0.5 else 0
        yield label, (
            f'<path d="M {cx:.2f} {cy:.2f} L {x0:.4f} {y0:.4f} '
            f'A {radius} {radius} 0 {large} 1 {x1:.4f} {y1:.4f} Z"'
        )
        angle = end


def _contribution_pies_svg(matrix: ContributionMatrix) -> str:
    per_row = 5
    size = 150
    radius = 52
    legend_height = 18 * len(matrix.col_ids) + 30
    rows_of_pies = (len(matrix.row_ids) + per_row - 1) // per_row
    width = per_row * size + 40
    height = 50 + rows_of_pies * size + legend_height
    colors = {c: _PALETTE[i % len(_PALETTE)] for i, c in enumerate(matrix.col_ids)}
    parts = _svg_open(width, height, "adapter contribution per test domain")
    for i, rid in enumerate(matrix.row_ids):
        cx = 20 + (i % per_row) * size + size / 2
        cy = 50 + (i // per_row) * size + size / 2 - 10
        fractions = []
        for cid in matrix.col_ids:
            value = matrix.cell(rid, cid)
            if value is not None:
                fractions.append((cid, value))
        for cid, shape in _pie_slices(fractions, cx, cy, radius):
            parts.append(f'{shape} fill="{colors[cid]}" stroke="#ffffff"/>')
        parts.append(
            f'<text x="{cx}" y="{cy + radius + 18}" text-anchor="middle" '
            f'font-family="monospace" font-size="11" fill="#222222">{rid}</text>'
        )
    ly = 50 + rows_of_pies * size + 10
    for i, cid in enumerate(matrix.col_ids):
        y = ly + 18 * i
        parts.append(
            f'<rect x="20" y="{y}" width="12" height="12" fill="{colors[cid]}"/>'
        )
        parts.append(
            f'<text x="38" y="{y + 10}" font-family="monospace" font-size="11" '
            f'fill="#222222">{cid}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _eval_header(args, lib: Library) -> list[tuple[str, object]]:
    return [
        ("format_version", FORMAT_VERSION),
        ("library_digest", library_digest(lib)),
        ("subcommand", "eval"),
        ("bench_source", args.bench_config or f"builtin:seed={args.seed}"),
        ("protocol", args.protocol),
        ("sweep", args.sweep),
        ("top_k", args.top_k),
        ("tau", args.tau),
        ("metric", args.metric),
        ("normalize", args.normalize),
        ("seed", args.seed),
    ]


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")


def cmd_eval(args) -> None:
    report_dir = Path(args.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    try:
        _run_eval(args, report_dir)
    except AdapterFuseError as exc:
        # partial reports stay on disk; the marker names what broke
        (report_dir / "FAILED").write_text(
            f"{type(exc).__name__}: {exc}\n", encoding="utf-8"
        )
        raise


def _run_eval(args, report_dir: Path) -> None:
    if args.bench_config:
        bench = bench_mod.benchmark_from_config(args.bench_config)
    else:
        bench = bench_mod.make_benchmark(args.seed)
    config = _config_from_args(args)
    header = _eval_header(args, bench.library)

    if args.sweep:
        grid = bench_mod.sweep_hyperparameters(bench)
        rows = [
            [k, tau, float(grid.h_means[i, j])]
            for i, k in enumerate(grid.k_values)
            for j, tau in enumerate(grid.tau_values)
        ]
        _write(
            report_dir / "sweep.csv",
            render_csv(header, ["top_k", "tau", "h_mean"], rows),
        )
        _write(report_dir / "sweep_heatmap.svg", _heatmap_svg(grid))
        return

    if args.protocol == "leave-one-out":
        result = bench_mod.run_leave_one_out(bench, config)
        suffix = "leave_one_out"
        excluded = [(d, d) for d in bench.domain_ids]
    else:
        result = bench_mod.run_all_inclusive(bench, config)
        suffix = "all_inclusive"
        excluded = []

    per_domain = {d: dict(result.per_domain[d]) for d in result.per_domain}
    per_domain["h_mean"] = dict(result.h_means)
    _write(
        report_dir / f"metrics_{suffix}.csv",
        metric_table_csv(header, result.methods, per_domain),
    )

    matrix = contribution_matrix(
        result.plans, adapter_ids=bench.domain_ids, excluded=excluded
    )
    _write(report_dir / f"contribution_{suffix}.csv", contribution_csv(header, matrix))
    _write(
        report_dir / f"contribution_{suffix}.svg", _contribution_pies_svg(matrix)
    )

    pairs = bench_mod.distance_improvement_pairs(bench)
    corr = distance_performance_correlation(pairs)
    _write(report_dir / "correlation.csv", correlation_csv(header, pairs, corr))


# ---------------------------------------------------------------------------
# stream
# ---------------------------------------------------------------------------


def cmd_stream(args) -> None:
    lib = load(args.library)
    config = _config_from_args(args)
    embeddings = read_embeddings_file(args.input)
    if args.clusters is not None:
        result = batch_cluster_fuse(embeddings, lib, config, args.clusters)
        print(
            json.dumps(
                {
                    "clusters": len(result.centroids),
                    "assignments": list(result.assignments),
                },
                sort_keys=True,
            )
        )
        for i, fused in enumerate(result.fused):
            print(
                json.dumps(
                    {
                        "cluster": i,
                        "size": sum(1 for a in result.assignments if a == i),
                        "center": list(result.centroids[i].values),
                        "plan": plan_report(fused.plan, config),
                    },
                    sort_keys=True,
                )
            )
        return
    if args.threshold is None:
        raise UsageError("--threshold is required when streaming (no default)")
    for event in run_stream(embeddings, lib, config, args.beta, args.threshold):
        print(json.dumps(event, sort_keys=True))


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adapterfuse",
        description="Proximity-weighted fusion of low-rank adapter libraries.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build", help="assemble a library directory")
    p_build.add_argument("stub", help="manifest stub JSON describing the inputs")
    p_build.add_argument("out", help="output library directory")
    p_build.set_defaults(func=cmd_build)

    p_query = sub.add_parser("query", help="print the fusion plan for one embedding")
    p_query.add_argument("--library", required=True)
    p_query.add_argument("--embedding", required=True, help="single-embedding file")
    _add_fusion_flags(p_query)
    p_query.add_argument("--merge-out", default=None, help="write the fused blob here")
    p_query.set_defaults(func=cmd_query)

    p_eval = sub.add_parser("eval", help="run the synthetic benchmark harnesses")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--bench-config", default=None)
    p_eval.add_argument(
        "--protocol",
        choices=("leave-one-out", "all-inclusive"),
        default="leave-one-out",
    )
    p_eval.add_argument("--sweep", action="store_true")
    _add_fusion_flags(p_eval)
    p_eval.add_argument("--report-dir", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_stream = sub.add_parser("stream", help="drive the debounced swap policy")
    p_stream.add_argument("--library", required=True)
    p_stream.add_argument("--input", required=True, help="embeddings file")
    p_stream.add_argument("--beta", type=float, default=0.9)
    p_stream.add_argument("--threshold", type=float, default=None)
    p_stream.add_argument("--clusters", type=int, default=None)
    _add_fusion_flags(p_stream)
    p_stream.set_defaults(func=cmd_stream)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        args.func(args)
    except AdapterFuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

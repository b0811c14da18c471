"""Command line interface: ingest, synth, run, serve, bench."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import bench as bench_mod
from . import codec, dataset, results
from .errors import Virt4dError
from .executor import (DEFAULT_TIME_BUDGET_S, calibrate_partition_bytes,
                       run_benchmark, sync_run)
from .io_engine import TilingPlan
from .kernels import AnalysisSpec, finalize_com


def _shape(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in value.lower().replace("x", " ").split())
    except ValueError:
        raise click.BadParameter(f"expected dimensions like 32x32, got {value!r}")


def _size(value: str) -> int:
    units = {"k": 2**10, "m": 2**20, "g": 2**30}
    v = value.strip().lower()
    for suffix, mult in units.items():
        if v.endswith(suffix):
            return int(float(v[:-1]) * mult)
    return int(v)


@click.group()
def main():
    """virt4d: virtual-detector processing for 4D-STEM datasets."""


@main.command()
@click.argument("source", type=click.Path(exists=True))
@click.argument("output_dir", type=click.Path())
@click.option("--layout", type=click.Choice(dataset.DTYPES), required=True)
@click.option("--scan", required=True, help="scan grid, e.g. 256x256")
@click.option("--sig", required=True, help="detector frame, e.g. 128x128")
@click.option("--partition-size", default="256M", show_default=True)
def ingest(source, output_dir, layout, scan, sig, partition_size):
    """Split a contiguous raw file into the partitioned layout + sidecar."""
    desc = dataset.ingest(source, layout, _shape(scan), _shape(sig),
                          output_dir, _size(partition_size))
    click.echo(f"ingested {desc.total_frames} frames into "
               f"{len(desc.partitions)} partitions at {output_dir}")


@main.command()
@click.argument("base", type=click.Path(exists=True))
@click.argument("output_dir", type=click.Path())
@click.option("--repeats", type=int, required=True)
@click.option("--partition-size", default="256M", show_default=True)
def synth(base, output_dir, repeats, partition_size):
    """Tile an ingested dataset along the slow scan axis."""
    desc = dataset.generate_synthetic(base, repeats, output_dir,
                                      _size(partition_size))
    click.echo(f"wrote {desc.total_frames} frames "
               f"({desc.total_bytes / 2**20:.0f} MiB) to {output_dir}")


def _spec_from_options(analysis, cx, cy, r, r_inner, r_outer, px, py, frame):
    if analysis == "disk":
        return AnalysisSpec(variant="mask_apply",
                            masks=({"kind": "disk", "cx": cx, "cy": cy, "r": r},))
    if analysis == "ring":
        return AnalysisSpec(variant="mask_apply",
                            masks=({"kind": "ring", "cx": cx, "cy": cy,
                                    "r_inner": r_inner, "r_outer": r_outer},))
    if analysis == "point":
        return AnalysisSpec(variant="mask_apply",
                            masks=({"kind": "point", "px": px, "py": py},))
    if analysis == "com":
        return AnalysisSpec(variant="com")
    if analysis == "sum":
        return AnalysisSpec(variant="sum_frames")
    return AnalysisSpec(variant="pick_frame", frame=frame)


@main.command()
@click.argument("dataset_path", type=click.Path(exists=True))
@click.option("--analysis", type=click.Choice(
    ["disk", "ring", "point", "com", "sum", "pick"]), required=True)
@click.option("--cx", type=float, default=0.0)
@click.option("--cy", type=float, default=0.0)
@click.option("--r", type=float, default=0.0)
@click.option("--r-inner", type=float, default=0.0)
@click.option("--r-outer", type=float, default=0.0)
@click.option("--px", type=int, default=0)
@click.option("--py", type=int, default=0)
@click.option("--frame", type=int, default=0)
@click.option("--out", type=click.Path(), help="directory for the result export")
@click.option("--render", type=click.Path(), help="write a PNG of channel 0")
@click.option("--workers", type=int, default=None)
@click.option("--backend", type=click.Choice(["mmap", "buffered", "direct"]),
              default="mmap", show_default=True)
@click.option("--tile-size", default="1M", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["text", "machine"]),
              default="text", show_default=True)
def run(dataset_path, analysis, cx, cy, r, r_inner, r_outer, px, py, frame,
        out, render, workers, backend, tile_size, fmt):
    """Run one analysis to completion and write the result."""
    descriptor, ds_dir = dataset.load_dataset(dataset_path)
    spec = _spec_from_options(analysis, cx, cy, r, r_inner, r_outer, px, py,
                              frame)
    grid = sync_run(ds_dir, descriptor, spec, workers=workers,
                    plan=TilingPlan(_size(tile_size)), backend=backend)
    summary = {"analysis": spec.to_dict(), "channels": list(grid.channels),
               "checksums": grid.channel_checksums()}
    if out:
        results.export_result_grid(grid, out)
        summary["result_dir"] = str(out)
        if analysis == "com":
            com_x, com_y, valid = finalize_com(grid)
            np.ascontiguousarray(com_x, dtype="<f8").tofile(Path(out) / "com_x.raw")
            np.ascontiguousarray(com_y, dtype="<f8").tofile(Path(out) / "com_y.raw")
            np.ascontiguousarray(valid, dtype="<f8").tofile(Path(out) / "com_valid.raw")
    if render:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        image = (grid.scan_images()[grid.channels[0]]
                 if grid.kind == "scan" else grid.sig_image())
        plt.imsave(render, image, cmap="gray")
        summary["render"] = str(render)
    if fmt == "machine":
        click.echo(json.dumps(summary))
    else:
        click.echo(f"channels: {', '.join(grid.channels)}")
        for label, ck in zip(grid.channels, summary["checksums"]):
            click.echo(f"  {label}: checksum {ck:.6g}")
        if out:
            click.echo(f"result written to {out}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=9000, show_default=True)
@click.option("--workers", type=int, default=None)
@click.option("--backend", type=click.Choice(["mmap", "buffered", "direct"]),
              default=None)
@click.option("--tile-size", default=None)
@click.option("--data-root", type=click.Path(), default=None,
              help="restrict dataset paths (also via VIRT4D_DATA_ROOT)")
@click.option("--grace", type=float, default=30.0, show_default=True,
              help="seconds before an unwatched running job is auto-cancelled")
@click.option("--ui-dir", type=click.Path(), default=None,
              help="static frontend directory (default: ./frontend/dist if present)")
def serve(host, port, workers, backend, tile_size, data_root, grace, ui_dir):
    """Start the HTTP + WebSocket service."""
    import uvicorn

    from .service import create_app
    if ui_dir is None and Path("frontend/dist").is_dir():
        ui_dir = "frontend/dist"
    app = create_app(data_root=data_root, workers=workers, grace_s=grace,
                     backend=backend,
                     tile_bytes=_size(tile_size) if tile_size else None,
                     ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command(name="bench")
@click.argument("dataset_path", type=click.Path(exists=True), required=False)
@click.option("--workers", default="1", show_default=True,
              help="comma-separated worker counts")
@click.option("--backend", type=click.Choice(["mmap", "buffered", "direct"]),
              default="mmap", show_default=True)
@click.option("--tile-size", default="1M", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True,
              help="seed of the single random mask")
@click.option("--cold", is_flag=True, help="declare the cache state as cold")
@click.option("--kernels", "kernels_flag", is_flag=True,
              help="also compare compiled vs pure kernel implementations")
@click.option("--out", type=click.Path(), help="write the report as JSON")
@click.option("--format", "fmt", type=click.Choice(["text", "machine"]),
              default="text", show_default=True)
def bench_cmd(dataset_path, workers, backend, tile_size, seed, cold,
              kernels_flag, out, fmt):
    """Throughput sweep with a single random mask, plus kernel comparison."""
    report = {}
    if dataset_path:
        descriptor, ds_dir = dataset.load_dataset(dataset_path)
        spec = AnalysisSpec(variant="mask_apply",
                            masks=({"kind": "random", "seed": seed},))
        counts = [int(c) for c in workers.split(",")]
        report = run_benchmark(ds_dir, descriptor, spec, backend, counts,
                               warm=not cold, plan=TilingPlan(_size(tile_size)))
    if kernels_flag or not dataset_path:
        report["kernel_comparison"] = bench_mod.benchmark_kernels()
    if out:
        Path(out).write_text(json.dumps(report, indent=2))
    if fmt == "machine":
        click.echo(json.dumps(report))
    else:
        for r in report.get("runs", []):
            click.echo(f"workers {r['workers']}: {r['mib_per_s']:.1f} MiB/s, "
                       f"first partial {r['first_partial_s']:.3f} s, "
                       f"speedup {r['speedup_vs_1']:.2f}x")
        kc = report.get("kernel_comparison")
        if kc:
            for name, k in kc["kernels"].items():
                click.echo(f"{name}: decode {k['decode_packed_mib_s']:.0f} MiB/s, "
                           f"apply {k['apply_f32_mib_s']:.0f} MiB/s")


def entry():
    try:
        main(standalone_mode=True)
    except Virt4dError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    entry()

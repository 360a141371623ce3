"""Command line entry point; every command writes into a run directory with a manifest."""

from __future__ import annotations

import json
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import click

from . import cost_model as cm
from . import pipeline as pl
from . import reports as rp
from .errors import HybridLabError, MissingRun
from .slot_engine import PROFILES

LAYER_REPORT = "layer_report.json"


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


class Context:
    def __init__(self, config: str | None, seed: int, profile: str, fhe_profile: str, out: str | None) -> None:
        self.config = config
        self.seed = seed
        self.profile = cm.network(profile)
        self.fhe_profile = PROFILES[fhe_profile]
        self.out = out

    def model(self, default: str) -> pl.ModelConfig:
        return pl.load_config(self.config or default)

    def run_dir(self, command: str) -> Path:
        d = Path(self.out) if self.out else Path("runs") / f"{command}-seed{self.seed}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def finish(self, command: str, run_dir: Path, cfg: pl.ModelConfig | None, files: dict[str, object]) -> None:
        for name, doc in files.items():
            (run_dir / name).write_text(rp.to_json(doc))
        manifest_path = run_dir / "manifest.json"
        prior = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        commands = dict(prior.get("commands", {}))
        commands[command] = {
            "files": sorted(files),
            "seed": self.seed,
            "profile": self.profile.name,
            "fhe_profile": self.fhe_profile.name,
            "config": cfg.to_record() if cfg is not None else None,
        }
        manifest = {"version": _version(), "commands": commands}
        manifest_path.write_text(rp.to_json(manifest))
        click.echo(f"wrote {run_dir}")


pass_ctx = click.make_pass_decorator(Context)


@click.group()
@click.option("--config", "config", default=None, help="Preset name or JSON file mirroring ModelConfig.")
@click.option("--seed", default=0, type=click.IntRange(0, 2**64 - 1), show_default=True)
@click.option("--profile", default="lan", type=click.Choice(sorted(cm.NETWORKS)), show_default=True)
@click.option("--fhe-profile", default="phantom", type=click.Choice(sorted(PROFILES)), show_default=True)
@click.option("--out", default=None, help="Run directory (default runs/<command>-seed<seed>).")
@click.pass_context
def main(ctx: click.Context, config: str | None, seed: int, profile: str, fhe_profile: str, out: str | None) -> None:
    """Hybrid CKKS/MPC transformer emulator."""
    ctx.obj = Context(config, seed, profile, fhe_profile, out)


def _seed32(seed: int) -> int:
    return seed % (2**32)


@main.command("run-layer")
@click.option("--gelu", type=click.Choice(["preeval", "mpc_poly"]), default=None)
@pass_ctx
def run_layer_cmd(c: Context, gelu: str | None) -> None:
    """Run one layer on shares and compare with the plaintext surrogate."""
    cfg = c.model("tiny")
    reports, err = rp.run_model(cfg, seed=_seed32(c.seed), gelu=gelu, fhe_profile=c.fhe_profile, layers=1)
    rec = reports[0].to_record()
    d = c.run_dir("run-layer")
    c.finish("run-layer", d, cfg, {LAYER_REPORT: rec})
    click.echo(f"max_abs_error={err:.3e} rounds={rec['rounds']['total']} overlay_{c.profile.name}={rec['overlay'][c.profile.name]:.4f}s")


@main.command("run-model")
@click.option("--layers", type=int, default=None, help="Number of layers (default N_L).")
@click.option("--gelu", type=click.Choice(["preeval", "mpc_poly"]), default=None)
@pass_ctx
def run_model_cmd(c: Context, layers: int | None, gelu: str | None) -> None:
    """Chain several layers on shares."""
    cfg = c.model("tiny")
    reports, err = rp.run_model(cfg, seed=_seed32(c.seed), gelu=gelu, fhe_profile=c.fhe_profile, layers=layers)
    recs = [r.to_record() for r in reports]
    d = c.run_dir("run-model")
    c.finish("run-model", d, cfg, {"model_report.json": {"layers": recs, "max_abs_error": err}, LAYER_REPORT: recs[0]})
    click.echo(f"layers={len(recs)} max_abs_error={err:.3e}")


@main.command("count-ops")
@pass_ctx
def count_ops_cmd(c: Context) -> None:
    """Attention kernel ledgers at full shape and boundary ciphertext counts."""
    cfg = c.model("bert-base")
    t2 = rp.table2(_seed32(c.seed), n=cfg.n, m=cfg.m, H=cfg.H, d_h=cfg.d_h, C=pl.score_C(cfg))
    t4 = rp.table4(cfg)
    d = c.run_dir("count-ops")
    c.finish("count-ops", d, cfg, {"table2.json": {"rows": t2}, "table4.json": {"rows": t4}})
    m = t2[0]
    click.echo(f"score rot={m['score_rot']} ctmul={m['score_ctmul']}  value rot={m['value_rot']} ctmul={m['value_ctmul']}")
    click.echo(f"boundary total preeval={t4[0]['total']} minimal={t4[1]['total']}")


@main.command("bench-conversion")
@click.option("--n", "n", default=64, show_default=True, help="Slots per ciphertext for the measured roundtrip.")
@click.option("--trials", default=8, show_default=True)
@pass_ctx
def bench_conversion_cmd(c: Context, n: int, trials: int) -> None:
    """Conversion payload model and a measured roundtrip."""
    rows = rp.table8()
    rt = rp.conversion_roundtrip(n=n, trials=trials, seed=_seed32(c.seed))
    d = c.run_dir("bench-conversion")
    c.finish("bench-conversion", d, None, {"table8.json": {"rows": rows}, "roundtrip.json": rt})
    for r in rows[:3]:
        click.echo(f"{r['mode']:>13}: {r['MB']} MB, {r[c.profile.name]:.2f} ms on {c.profile.name}")
    click.echo(f"roundtrip max error {rt['max_err_roundtrip']:.2e}")


@main.command("cost-decide")
@pass_ctx
def cost_decide_cmd(c: Context) -> None:
    """Expand/Minimal decisions at the GELU boundary."""
    rows = {scope: cm.table14(c.fhe_profile, scope) for scope in ("layer", "model")}
    d = c.run_dir("cost-decide")
    c.finish("cost-decide", d, None, {"table14.json": rows})
    for r in rows["layer"]:
        if r["profile"] == c.profile.name:
            click.echo(f"{r['model']:>10} {r['profile']}: dT_conv={r['dT_conv']:.2f}s dT_comp={r['dT_comp']:.2f}s -> {r['decision']}")


@main.command("ablate")
@click.option("--variant", type=click.Choice(["wo_scp", "wo_cc", "baseline_blb_constants"]), required=True)
@pass_ctx
def ablate_cmd(c: Context, variant: str) -> None:
    """Deltas from disabling stage-compatible packing or complex conversion."""
    cfg = c.model("bert-base")
    rec = rp.ablate(cfg, variant, c.fhe_profile, _seed32(c.seed))
    d = c.run_dir("ablate")
    c.finish("ablate", d, cfg, {f"ablation_{variant}.json": rec})
    click.echo(json.dumps(rp.to_plain(rec), sort_keys=True))


@main.command("emit-report")
@click.option("--kind", type=click.Choice(rp.REPORT_KINDS), required=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="json", show_default=True)
@click.option("--run-dir", type=click.Path(file_okay=False), default=None, help="Run directory holding earlier results.")
@pass_ctx
def emit_report_cmd(c: Context, kind: str, fmt: str, run_dir: str | None) -> None:
    """Write a table-shaped report."""
    src = Path(run_dir) if run_dir else (Path(c.out) if c.out else None)
    runs: dict[str, object] = {}
    if src is not None and (src / LAYER_REPORT).exists():
        runs["layer"] = json.loads((src / LAYER_REPORT).read_text())
    cfg = c.model("bert-base")
    out = src or c.run_dir("emit-report")
    try:
        path = rp.emit_report(kind, fmt, out, cfg, runs, _seed32(c.seed), c.fhe_profile)
    except MissingRun as e:
        raise click.ClickException(f"{e}; run `run-layer` into the same directory first") from None
    click.echo(f"wrote {path}")


def run() -> None:
    try:
        main()
    except HybridLabError as e:
        raise SystemExit(f"error: {type(e).__name__}: {e}") from None


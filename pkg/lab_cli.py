#!/usr/bin/env python3
"""
Command-line entry point for the CNN asymptotics lab
Usage: python lab_cli.py <command> (--config <path> | --preset <name>) [--seed u64] [--out dir] [--workers k]
"""

from pathlib import Path
from typing import Optional

import typer

from cnnldp.errors import ConfigError
from cnnldp.experiments import COMMANDS, PRESETS, load_config, preset, run
from cnnldp.settings import setup_logging

app = typer.Typer(help="Covariance chains, NNGP limits and large-deviation rates of deep Gaussian CNNs",
                  add_completion=False, no_args_is_help=True)

DESCRIPTIONS = {
    "validate": "Check the architecture and run the activation growth probe",
    "chain-sim": "Simulate the empirical covariance chain for every n in n_list",
    "limit": "Estimate the deterministic limit chain by Monte Carlo",
    "clt-check": "LLN scaling, KS on standardized outputs and the two-sampler energy test",
    "rate": "Layer rate I_l at multiples of the limit kernel, plus MGF convexity",
    "rate-chain": "Chain rate evaluated at the limit chain (should vanish)",
    "ldp-verify": "Empirical -(1/n) log P of the configured event, with the exact law when known",
    "posterior": "Posterior potential and the laziness profile",
}


def _execute(command: str, config: Optional[Path], preset_name: Optional[str], seed: Optional[int],
             out: Optional[Path], workers: Optional[int], log_level: Optional[str]):
    setup_logging(log_level)
    try:
        if (config is None) == (preset_name is None):
            raise ConfigError("give exactly one of --config or --preset")
        cfg = load_config(config) if config is not None else preset(preset_name)
    except ConfigError as e:
        typer.echo(f"❌ {e}", err=True)
        raise typer.Exit(code=2)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    outcome = run(command, cfg, out, workers)
    if outcome.directory is not None:
        typer.echo(f"📁 Artifacts in {outcome.directory}")
    raise typer.Exit(code=outcome.status)


def _register(command: str):
    def handler(
        config: Optional[Path] = typer.Option(None, "--config", help="YAML experiment file"),
        preset_name: Optional[str] = typer.Option(None, "--preset", help="Built-in preset name"),
        seed: Optional[int] = typer.Option(None, "--seed", min=0, max=2 ** 64 - 1, help="Override the config seed"),
        out: Optional[Path] = typer.Option(None, "--out", help="Artifact directory"),
        workers: Optional[int] = typer.Option(None, "--workers", min=1, help="Worker cap"),
        log_level: Optional[str] = typer.Option(None, "--log-level", help="DEBUG, INFO, WARNING"),
    ):
        _execute(command, config, preset_name, seed, out, workers, log_level)

    app.command(command, help=DESCRIPTIONS[command])(handler)


for _command in COMMANDS:
    _register(_command)


@app.command("presets")
def list_presets():
    """List the built-in presets"""
    for name, builder in PRESETS.items():
        spec = builder().arch
        typer.echo(f"{name:<22} L={spec.hidden_layers} N={spec.spatial_dims} "
                   f"P={spec.n_inputs} activation={spec.activation.kind.value}")


if __name__ == "__main__":
    app()

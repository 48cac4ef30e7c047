"""`plot` command: render run figures from a manifest."""

from __future__ import annotations

import os
import sys

import click

from .manifest import RunManifest, ManifestError
from .figures import plot_tripod, plot_comparison


def _load(manifest_path: str) -> RunManifest:
    try:
        return RunManifest.load(manifest_path)
    except ManifestError as exc:
        click.echo(f"manifest error: {exc}", err=True)
        sys.exit(2)


@click.group()
def main():
    """Figures for transport-map experiment runs."""


@main.command("tripod")
@click.argument("manifest_path", type=click.Path())
@click.option("--out", default=None, type=click.Path(),
              help="Output image path (default: tripod.png next to the manifest).")
def tripod_cmd(manifest_path, out):
    """Source / reference / target scatter panels."""
    manifest = _load(manifest_path)
    out = out or os.path.join(os.path.dirname(os.path.abspath(manifest_path)),
                              "tripod.png")
    try:
        info = plot_tripod(manifest, out)
    except ManifestError as exc:
        click.echo(f"manifest error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"wrote {info['out_image']}")


@main.command("compare")
@click.argument("manifest_path", type=click.Path())
@click.option("--out", default=None, type=click.Path(),
              help="Output image path (default: comparison.png next to the manifest).")
@click.option("--losses-out", default=None, type=click.Path(),
              help="Loss-curve image path (default: losses.png next to the manifest).")
def compare_cmd(manifest_path, out, losses_out):
    """Target vs composed vs direct panels plus loss curves."""
    manifest = _load(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    out = out or os.path.join(base, "comparison.png")
    losses_out = losses_out or os.path.join(base, "losses.png")
    try:
        info = plot_comparison(manifest, out, losses_out)
    except ManifestError as exc:
        click.echo(f"manifest error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"wrote {info['out_image']} and {info['losses_out']} "
               f"(composed divergence {info['annotations']['composed']!r}, "
               f"direct {info['annotations']['direct']!r})")


if __name__ == "__main__":
    main()

"""Thin command-line client for the qualia service.

By default the service runs in-process (no deployment needed); pass
--server to talk to a remote instance instead. Paths are interpreted on
whichever side runs the pipeline. Exit codes: 0 success, 1 validation
error, 2 runtime failure.
"""

from __future__ import annotations

import sys

import click
import httpx

from . import __version__


class ServiceClient:
    def __init__(self, server: str | None):
        if server:
            self._client = httpx.Client(base_url=server, timeout=None)
        else:
            from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app(), raise_server_exceptions=False)

    def post(self, path: str, payload: dict) -> tuple[int, dict]:
        try:
            resp = self._client.post(path, json=payload)
        except httpx.HTTPError as exc:
            click.echo(f"error: cannot reach service: {exc}", err=True)
            sys.exit(2)
        try:
            body = resp.json()
        except ValueError:
            body = {"detail": resp.text}
        return resp.status_code, body


def _fail_for(status: int, body: dict) -> None:
    detail = body.get("detail", body)
    click.echo(f"error: {detail}", err=True)
    sys.exit(1 if 400 <= status < 500 else 2)


def _echo_config(body: dict) -> None:
    for line in body.get("effective_config", []):
        click.echo(f"# {line}", err=True)


def _call(ctx: click.Context, path: str, extra: dict) -> dict:
    client: ServiceClient = ctx.obj["client"]
    payload = {
        "config_path": ctx.obj["config"],
        "overrides": dict(ctx.obj["overrides"]),
        **extra,
    }
    status, body = client.post(path, payload)
    if status != 200:
        _fail_for(status, body)
    _echo_config(body)
    return body


def _parse_overrides(pairs: tuple[str, ...], jobs: int | None) -> list[tuple[str, str]]:
    overrides = []
    for pair in pairs:
        if "=" not in pair:
            raise click.UsageError(f"--opt expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        overrides.append((key.strip(), value.strip()))
    if jobs is not None:
        overrides.append(("jobs", str(jobs)))
    return overrides


@click.group()
@click.version_option(__version__)
@click.option("-c", "--config", "config_path", type=click.Path(), default=None,
              help="Config file of key = value lines.")
@click.option("-o", "--opt", "options", multiple=True, metavar="KEY=VALUE",
              help="Override a config key (repeatable).")
@click.option("--jobs", type=int, default=None, help="Cap worker count.")
@click.option("--server", default=None, metavar="URL",
              help="Remote service URL; defaults to an in-process service.")
@click.pass_context
def main(ctx, config_path, options, jobs, server):
    """Video quality assessment from feeling prompts + fragment features."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path
    ctx.obj["overrides"] = _parse_overrides(options, jobs)
    ctx.obj["client"] = ServiceClient(server)


@main.command()
@click.argument("manifest", type=click.Path())
@click.pass_context
def extract(ctx, manifest):
    """Extract semantic + fragment caches for every manifest entry."""
    body = _call(ctx, "/extract", {"manifest": manifest})
    click.echo(f"videos={body['videos']} extracted={body['extracted']} "
               f"skipped={body['skipped']} cache_dir={body['cache_dir']}")
    if body["failures"]:
        for item in body["failures"]:
            click.echo(f"failed: {item['video_id']}: {item['error']}", err=True)
        sys.exit(2)


@main.command()
@click.argument("manifest", type=click.Path())
@click.pass_context
def train(ctx, manifest):
    """Train a quality model; writes a checkpoint and a training log."""
    body = _call(ctx, "/train", {"manifest": manifest})
    click.echo(f"checkpoint={body['checkpoint']}")
    click.echo(f"checkpoint_digest={body['checkpoint_digest']}")
    click.echo(f"log={body['log_path']} epochs={body['epochs']} "
               f"final_train_srocc={body['final_train_srocc']}")


@main.command(name="eval")
@click.argument("manifest", type=click.Path())
@click.argument("checkpoint", type=click.Path())
@click.pass_context
def eval_cmd(ctx, manifest, checkpoint):
    """Score a manifest with a checkpoint and report correlations."""
    body = _call(ctx, "/eval", {"manifest": manifest, "checkpoint": checkpoint})
    rep = body["report"]
    click.echo(f"n={rep['n']} srocc={rep['srocc']:.6f} plcc={rep['plcc']:.6f} "
               f"krocc={rep['krocc']:.6f}")
    click.echo(f"report_json={body['json_path']}")
    click.echo(f"report_csv={body['csv_path']}")


@main.command()
@click.argument("video", type=click.Path())
@click.argument("checkpoint", type=click.Path())
@click.pass_context
def predict(ctx, video, checkpoint):
    """Print the predicted MOS-scale score for one video."""
    body = _call(ctx, "/predict", {"video": video, "checkpoint": checkpoint})
    click.echo(f"{body['score']:.6f}")


@main.command()
@click.argument("manifest", type=click.Path())
@click.pass_context
def splits(ctx, manifest):
    """Run the repeated train/test split protocol."""
    body = _call(ctx, "/splits", {"manifest": manifest})
    for rep in body["reports"]:
        click.echo(f"split={rep['split_id']} n={rep['n']} srocc={rep['srocc']:.6f} "
                   f"plcc={rep['plcc']:.6f} krocc={rep['krocc']:.6f}")
    for label in ("mean", "median"):
        stats = body[label]
        click.echo(f"{label}: srocc={stats['srocc']:.6f} plcc={stats['plcc']:.6f} "
                   f"krocc={stats['krocc']:.6f}")
    click.echo(f"report_json={body['json_path']}")
    click.echo(f"report_csv={body['csv_path']}")


@main.command()
@click.option("--video", type=click.Path(), default=None)
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--kind", default="brightness", show_default=True,
              help="Distortion kind for curve mode.")
@click.option("--description", default="bright", show_default=True,
              help="Prompt channel for curve mode.")
@click.option("--compare", default=None, metavar="BANKS",
              help="Comma-separated bank labels (objective,subjective,both); "
                   "switches to prompt-comparison mode.")
@click.pass_context
def probe(ctx, video, manifest, kind, description, compare):
    """Distortion response curves, or prompt-bank comparison with --compare."""
    if compare is not None:
        if manifest is None:
            raise click.UsageError("--compare requires --manifest")
        banks = [tok.strip() for tok in compare.split(",") if tok.strip()]
        body = _call(ctx, "/probe/compare", {"manifest": manifest, "banks": banks})
        for row in body["rows"]:
            click.echo(f"bank={row['bank']} r={row['r']} srocc={row['srocc']:.6f} "
                       f"plcc={row['plcc']:.6f} krocc={row['krocc']:.6f}")
        click.echo(f"table_csv={body['csv_path']}")
        return
    body = _call(ctx, "/probe/curve", {"video": video, "manifest": manifest,
                                       "kind": kind, "description": description})
    for curve in body["curves"]:
        click.echo(f"curve_csv={curve['csv_path']}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()

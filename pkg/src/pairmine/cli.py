"""Command-line client for the mining service.

Every subcommand is a thin HTTP call: against ``--server URL`` when given,
otherwise against an in-process instance of the service (no daemon needed).
Exit codes: 0 success, 2 configuration error, 3 missing/stale artifact,
4 numeric failure.
"""

from __future__ import annotations

import asyncio
import json
import sys
from urllib.parse import quote

import click
import httpx

from .errors import ConfigError, PairmineError
from .pipeline import STAGES


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a flat JSON object")
    return raw


def _parse_overrides(pairs: tuple[str, ...]) -> dict:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--stage-override expects key=value, got {pair!r}")
        overrides[key] = value
    return overrides


def _request(server: str | None, method: str, path: str, payload: dict | None = None) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.request(method, path, json=payload)

    from .service.app import app

    async def _call() -> httpx.Response:
        transport = httpx.ASGITransport(app=app, raise_app_exceptions=False)
        async with httpx.AsyncClient(transport=transport, base_url="http://pairmine.local", timeout=None) as client:
            return await client.request(method, path, json=payload)

    return asyncio.run(_call())


def _finish(response: httpx.Response) -> None:
    try:
        body = response.json()
    except ValueError:
        body = {"detail": response.text}
    if response.status_code == 200:
        click.echo(json.dumps(body, indent=2, sort_keys=True))
        return
    detail = body.get("detail", "request failed")
    click.echo(f"error: {detail}", err=True)
    sys.exit(int(body.get("exit_code", 1)))


def _stage_payload(ctx: click.Context) -> dict:
    obj = ctx.obj
    if not obj.get("config"):
        raise ConfigError("--config is required for pipeline commands")
    payload: dict = {"config": _load_config_file(obj["config"]), "overrides": obj["overrides"]}
    if obj.get("workdir"):
        payload["workdir"] = obj["workdir"]
    if obj.get("seed") is not None:
        payload["seed"] = obj["seed"]
    return payload


@click.group()
@click.option("--config", type=click.Path(), help="Flat JSON pipeline config file.")
@click.option("--workdir", type=click.Path(), help="Override the configured work directory.")
@click.option("--seed", type=int, default=None, help="Override the configured rng seed.")
@click.option(
    "--stage-override",
    "stage_overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override one config key (repeatable).",
)
@click.option("--server", default=None, help="Base URL of a running service; default runs in-process.")
@click.pass_context
def main(ctx: click.Context, config, workdir, seed, stage_overrides, server) -> None:
    """Mine input/output training pairs with a biencoder + crossencoder cascade."""
    ctx.ensure_object(dict)
    try:
        overrides = _parse_overrides(stage_overrides)
    except PairmineError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    ctx.obj.update(
        {"config": config, "workdir": workdir, "seed": seed, "overrides": overrides, "server": server}
    )


def _run_stage_command(ctx: click.Context, stage: str) -> None:
    try:
        payload = _stage_payload(ctx)
    except PairmineError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    _finish(_request(ctx.obj["server"], "POST", f"/stages/{stage}", payload))


_CLI_STAGE_NAMES = {
    "ingest": "ingest",
    "train-biencoder": "train",
    "embed": "embed",
    "index": "index",
    "mine": "mine",
    "train-cross": "train_cross",
    "filter": "filter",
    "export": "export",
}


def _make_stage_command(cli_name: str, stage: str):
    @main.command(name=cli_name, help=f"Run the '{stage}' pipeline stage.")
    @click.pass_context
    def _cmd(ctx: click.Context) -> None:
        _run_stage_command(ctx, stage)

    return _cmd


for _cli_name, _stage in _CLI_STAGE_NAMES.items():
    _make_stage_command(_cli_name, _stage)

assert set(_CLI_STAGE_NAMES.values()) == set(STAGES)


@main.command(name="run-all")
@click.pass_context
def run_all(ctx: click.Context) -> None:
    """Run every stage in order: ingest through export."""
    try:
        payload = _stage_payload(ctx)
    except PairmineError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    _finish(_request(ctx.obj["server"], "POST", "/run-all", payload))


@main.command()
@click.option("--candidates", required=True, type=click.Path(), help="Candidate or reranked JSONL file.")
@click.option("--gold", required=True, type=click.Path(), help="Gold pair JSON file (x_id -> y_id).")
@click.option("--ks", default="1,4,10,100", show_default=True, help="Comma-separated cutoffs.")
@click.pass_context
def evaluate(ctx: click.Context, candidates: str, gold: str, ks: str) -> None:
    """Recall@k / precision@N of a ranked candidate file against gold pairs."""
    try:
        k_values = [int(part) for part in ks.split(",") if part.strip()]
    except ValueError:
        click.echo(f"error: --ks expects comma-separated integers, got {ks!r}", err=True)
        sys.exit(2)
    payload = {"candidates_path": candidates, "gold_path": gold, "ks": k_values}
    _finish(_request(ctx.obj["server"], "POST", "/evaluate", payload))


@main.command()
@click.option("--export", "export_path", required=True, type=click.Path(), help="Exported mined.jsonl.")
@click.pass_context
def report(ctx: click.Context, export_path: str) -> None:
    """Abstractiveness diagnostics (ROUGE precision) for a mined dataset."""
    _finish(_request(ctx.obj["server"], "POST", "/report/abstractiveness", {"export_path": export_path}))


@main.command()
@click.option("--preset", default="toy", show_default=True, help="Synthetic preset name.")
@click.option("--out-dir", required=True, type=click.Path(), help="Directory for generated files.")
@click.option("--seed-size", default=100, show_default=True, type=int)
@click.pass_context
def synth(ctx: click.Context, preset: str, out_dir: str, seed_size: int) -> None:
    """Generate a synthetic corpus workspace (x/y corpora, seed set, gold map)."""
    payload = {"preset": preset, "out_dir": out_dir, "seed_size": seed_size}
    _finish(_request(ctx.obj["server"], "POST", "/synthetic", payload))


@main.command()
@click.option("--workdir", "workdir_arg", required=True, type=click.Path())
@click.pass_context
def manifest(ctx: click.Context, workdir_arg: str) -> None:
    """Show the stage manifest recorded in a work directory."""
    _finish(_request(ctx.obj["server"], "GET", f"/manifest?workdir={quote(workdir_arg)}"))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Start the mining service."""
    import uvicorn

    uvicorn.run("pairmine.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()

"""Command-line client for the driftgate service.

Every subcommand talks HTTP to a service instance: pass --server to reach a
running one, or omit it and an ephemeral server is started on a loopback
port for the duration of the command.
"""

from __future__ import annotations

import threading
import time
from pathlib import Path

import click
import httpx
import uvicorn

from .service.app import create_app

POLL_SECONDS = 0.15


class _EphemeralServer:
    """In-process uvicorn instance bound to a free loopback port."""

    def __enter__(self) -> str:
        config = uvicorn.Config(create_app(), host="127.0.0.1", port=0, log_level="error")
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self._thread.start()
        deadline = time.time() + 10
        while not self._server.started:
            if not self._thread.is_alive() or time.time() > deadline:
                raise click.ClickException("local service failed to start")
            time.sleep(0.01)
        port = self._server.servers[0].sockets[0].getsockname()[1]
        return f"http://127.0.0.1:{port}"

    def __exit__(self, *exc) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=5)


class _Client:
    def __init__(self, server: str | None):
        self._explicit = server
        self._ephemeral = None

    def __enter__(self) -> httpx.Client:
        base = self._explicit
        if base is None:
            self._ephemeral = _EphemeralServer()
            base = self._ephemeral.__enter__()
        return httpx.Client(base_url=base, timeout=httpx.Timeout(30.0, read=None))

    def __exit__(self, *exc) -> None:
        if self._ephemeral is not None:
            self._ephemeral.__exit__(*exc)


def _fail(message: str, code: int = 1) -> None:
    click.echo(f"error: {message}", err=True)
    raise SystemExit(code)


@click.group()
def main() -> None:
    """Continual-learning experiments on drifting feature streams."""


@main.command()
@click.option("--config", "config_path", required=True, help="TOML (or JSON) experiment config.")
@click.option("--jobs", default=1, show_default=True, help="Worker pool width for grid points.")
@click.option("--out", "out_dir", default=None, help="Output directory (overrides the config).")
@click.option("--server", default=None, help="URL of a running service; default is in-process.")
def run(config_path: str, jobs: int, out_dir: str | None, server: str | None) -> None:
    """Execute an experiment sweep and wait for its results."""
    path = Path(config_path)
    try:
        text = path.read_text()
    except OSError as exc:
        _fail(f"cannot read config {config_path}: {exc}", code=2)
    if out_dir is None:
        out_dir = None  # server falls back to the config's output dir
    with _Client(server) as client:
        resp = client.post(
            "/experiments", json={"config_toml": text, "out_dir": out_dir, "jobs": jobs}
        )
        if resp.status_code == 400:
            _fail(resp.json().get("detail", "bad config"), code=2)
        resp.raise_for_status()
        job_id = resp.json()["id"]
        while True:
            info = client.get(f"/experiments/{job_id}").json()
            if info["state"] in ("done", "failed"):
                break
            if info["total"]:
                click.echo(f"\r{info['completed']}/{info['total']} runs", nl=False, err=True)
            time.sleep(POLL_SECONDS)
        click.echo("", err=True)
        if info["state"] == "failed":
            _fail(info.get("error") or "experiment failed")
        summary = info.get("summary") or {}
        for name, stats in sorted(summary.get("methods", {}).items()):
            mean = stats.get("mean_jaccard")
            spread = stats.get("delta_std")
            click.echo(
                f"{name:>10}: mean J = {mean:.4f}"
                + (f" +/- {spread:.4f} over the delta grid" if spread is not None else "")
                + (f"  ({stats['failed']} failed)" if stats.get("failed") else "")
            )
        click.echo(f"results in {info['out_dir']}")


@main.command()
@click.option("--results", "results_dir", required=True, help="Directory holding results.csv.")
@click.option(
    "--kind",
    required=True,
    type=click.Choice(["delta-curve", "memory-curve", "gate-popcount", "mas-compare"]),
)
@click.option("--server", default=None, help="URL of a running service; default is in-process.")
def plot(results_dir: str, kind: str, server: str | None) -> None:
    """Emit tab-separated plot data from an experiment's results."""
    with _Client(server) as client:
        resp = client.post(
            "/plots", json={"results_dir": str(Path(results_dir).resolve()), "kind": kind}
        )
        if resp.status_code == 404:
            _fail(resp.json().get("detail", "results not found"))
        resp.raise_for_status()
        for f in resp.json()["files"]:
            click.echo(f)


@main.command()
@click.option("--server", default=None, help="URL of a running service; default is in-process.")
def verify(server: str | None) -> None:
    """Run the oracle suite: memory accounting, gradient checks, LASSO KKT."""
    with _Client(server) as client:
        resp = client.post("/verify")
        resp.raise_for_status()
        body = resp.json()
        for check in body["checks"]:
            status = "PASS" if check["passed"] else "FAIL"
            click.echo(f"[{status}] {check['name']}: {check['detail']}")
        if not body["ok"]:
            raise SystemExit(1)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8716, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the driftgate service in the foreground."""
    uvicorn.run(create_app(), host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()

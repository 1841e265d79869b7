"""Command-line client for the discovery service.

Every subcommand builds a request and sends it to the HTTP API: against a
remote server when ``--server`` (or ODESEARCH_SERVER) is set, otherwise
against the app mounted in-process, so no server needs to be running for
local use.  ``odesearch serve`` starts the service itself.
"""

from __future__ import annotations

import asyncio

import click
import httpx


def _call(server: str | None, method: str, path: str, payload: dict | None = None) -> dict:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            response = client.request(method, path, json=payload)
    else:
        response = asyncio.run(_call_in_process(method, path, payload))
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        raise click.ClickException(f"{path} failed ({response.status_code}): {detail}")
    return response.json()


async def _call_in_process(method: str, path: str, payload: dict | None):
    from .service import app

    transport = httpx.ASGITransport(app=app)
    async with httpx.AsyncClient(transport=transport, base_url="http://odesearch.local",
                                 timeout=None) as client:
        return await client.request(method, path, json=payload)


def _settings_from_options(options: dict) -> dict:
    settings = {
        "proposer": options["proposer"],
        "seed": options["seed"],
        "iters": options["iters"],
        "islands": options["islands"],
        "k": options["k"],
        "b": options["b"],
        "refine_every": options["refine_every"],
        "mix": options["mix"],
        "temperature": options["temperature"],
    }
    if options.get("endpoint"):
        settings["endpoint"] = options["endpoint"]
    if options.get("model"):
        settings["model"] = options["model"]
    if options.get("script"):
        settings["script_path"] = options["script"]
    if options.get("chat_log"):
        settings["chat_log"] = options["chat_log"]
    return settings


def search_options(fn):
    options = [
        click.option("--proposer", type=click.Choice(["chat", "scripted", "random"]),
                     default="random", show_default=True, help="Equation proposal backend."),
        click.option("--endpoint", default=None, help="Chat endpoint URL (or ODESEARCH_ENDPOINT)."),
        click.option("--model", default=None, help="Chat model name (or ODESEARCH_MODEL)."),
        click.option("--script", default=None, type=click.Path(exists=True),
                     help="JSON batches for the scripted proposer."),
        click.option("--chat-log", default=None, help="Mirror chat requests/responses to this JSONL file."),
        click.option("--temperature", default=0.7, show_default=True),
        click.option("--seed", default=0, show_default=True),
        click.option("--iters", default=200, show_default=True),
        click.option("--islands", default=4, show_default=True),
        click.option("--k", default=8, show_default=True, help="In-context examples per prompt."),
        click.option("--b", default=3, show_default=True, help="Proposals requested per prompt."),
        click.option("--refine-every", default=5, show_default=True),
        click.option("--mix", default=2, show_default=True, help="Migrants per island at refinement."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


@click.group()
@click.option("--server", default=None, envvar="ODESEARCH_SERVER",
              help="Remote service URL; default runs the service in-process.")
@click.pass_context
def main(ctx, server):
    """Discover governing equations of dynamical systems from trajectories."""
    ctx.obj = {"server": server}


@main.command()
@click.option("--registry", default=None, type=click.Path(exists=True),
              help="Registry TOML (default: the packaged benchmark).")
@click.option("--system", default=None, help="Name filter; default regenerates everything.")
@click.option("--out", required=True, type=click.Path(), help="Output directory for CSV trajectories.")
@click.pass_context
def simulate(ctx, registry, system, out):
    """Regenerate train/test trajectories as CSV files."""
    payload = {"registry": registry, "system": system, "out": out}
    body = _call(ctx.obj["server"], "POST", "/simulate", payload)
    click.echo(f"simulated {body['count']} system(s), wrote {len(body['written'])} files to {out}")


@main.command()
@click.option("--registry", default=None, type=click.Path(exists=True))
@click.option("--system", required=True, help="System name (exact or unambiguous substring).")
@click.option("--out", default=None, type=click.Path(), help="Write run artifacts here.")
@search_options
@click.pass_context
def discover(ctx, registry, system, out, **options):
    """Run discovery on a single benchmark system."""
    payload = {
        "registry": registry,
        "system": system,
        "out": out,
        "settings": _settings_from_options(options),
    }
    body = _call(ctx.obj["server"], "POST", "/discover", payload)
    report = body["report"]
    click.echo(f"system: {report['system']} (D={report['dim']})")
    if report.get("error"):
        click.echo(f"error: {report['error']}")
        return
    for index, equation in enumerate(report["equations"]):
        click.echo(f"  dx_{index}/dt = {equation}")
    click.echo(f"total complexity: {report['total_complexity']}")
    click.echo(f"train fitness: {report['train_fitness']:.6g}")
    click.echo(f"test NMSE: {report['test_nmse']:.6g}")
    hits = [key for key, flag in report["success"].items() if flag]
    click.echo("discovered at: " + (", ".join(hits) if hits else "none"))


@main.command()
@click.option("--registry", default=None, type=click.Path(exists=True))
@click.option("--system", default=None, help="Optional name filter.")
@click.option("--out", required=True, type=click.Path(), help="Artifact directory.")
@click.option("--workers", default=1, show_default=True)
@search_options
@click.pass_context
def sweep(ctx, registry, system, out, workers, **options):
    """Run the benchmark over the registry and write the artifact set."""
    payload = {
        "registry": registry,
        "system": system,
        "out": out,
        "workers": workers,
        "settings": _settings_from_options(options),
    }
    body = _call(ctx.obj["server"], "POST", "/sweep", payload)
    click.echo(f"swept {body['n_systems']} system(s); artifacts in {body['out']}")
    header = ["dim", "n"] + [key for key in body["table"][0]["counts"]]
    click.echo("  ".join(f"{h:>6}" for h in header))
    for row in body["table"]:
        cells = [row["dim"], row["n_systems"]] + list(row["counts"].values())
        click.echo("  ".join(f"{c:>6}" for c in cells))


@main.command()
@click.option("--runs", required=True, type=click.Path(exists=True),
              help="Directory of *.report.json files from a sweep.")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def report(ctx, runs, out):
    """Re-aggregate discovery tables and curves from per-run reports."""
    body = _call(ctx.obj["server"], "POST", "/report", {"runs": runs, "out": out})
    click.echo(f"aggregated {body['n_reports']} report(s) into {body['out']}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the discovery service."""
    import uvicorn

    uvicorn.run("odesearch.service:app", host=host, port=port)


if __name__ == "__main__":
    main()

"""Command-line client for the engine.

Every subcommand marshals its flags into the service request schemas.
Without --server the request is handled in-process by the same functions
the HTTP service routes to; with --server it is posted to a running
instance (which must share a filesystem for file-producing commands).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
A config file (flat `key = value` lines, keys matching flag names with
underscores) supplies defaults; explicit flags win. The environment
variable EMBERCL_DATA_DIR provides the base directory for relative
dataset paths.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import __version__
from .errors import (
    DataFormatError,
    EngineError,
    ModeMismatchError,
    NumericFailureError,
)
from .data import SyntheticSpecError
from .schemas import (
    SweepRequest,
    SyntheticRequest,
    TrainRequest,
    ValidateRequest,
    ZeroShotRequest,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_STATUS_TO_EXIT = {400: EXIT_USAGE, 404: EXIT_DATA, 422: EXIT_DATA, 500: EXIT_NUMERIC}


class RemoteError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.status = status
        self.exit_code = _STATUS_TO_EXIT.get(status, EXIT_USAGE)


def load_config_file(path: str) -> dict[str, str]:
    """Flat key = value lines; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise click.UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce_like(example, text: str):
    if isinstance(example, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(example, int):
        return int(text)
    if isinstance(example, float):
        return float(text)
    return text


def apply_config(ctx: click.Context, values: dict) -> dict:
    """Fill every flag the user did not pass explicitly from the config file."""
    config = ctx.obj.get("config") or {}
    out = dict(values)
    for key, current in values.items():
        if key not in config:
            continue
        source = ctx.get_parameter_source(key)
        if source is not None and source.name == "COMMANDLINE":
            continue
        out[key] = _coerce_like(current, config[key]) if current is not None else config[key]
    return out


def resolve_path(ctx: click.Context, path: str | None) -> str | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_absolute() and ctx.obj.get("data_dir"):
        return str(Path(ctx.obj["data_dir"]) / p)
    return str(p)


def dispatch(ctx: click.Context, route: str, request, response_model):
    """In-process call by default; HTTP POST when --server is set."""
    server = ctx.obj.get("server")
    if server is None:
        from . import service

        handler = {
            "/datasets/synthetic": service.handle_synthetic,
            "/datasets/validate": service.handle_validate,
            "/runs/train": service.handle_train,
            "/runs/zeroshot": service.handle_zeroshot,
            "/runs/sweep": service.handle_sweep,
        }[route]
        return handler(request)
    import httpx

    reply = httpx.post(
        server.rstrip("/") + route, json=request.model_dump(), timeout=None
    )
    if reply.status_code != 200:
        try:
            doc = reply.json()
        except ValueError:
            doc = {"code": "unknown", "message": reply.text}
        raise RemoteError(reply.status_code, doc.get("code", "unknown"), doc.get("message", ""))
    return response_model.model_validate(reply.json())


@click.group()
@click.version_option(version=__version__, prog_name="embercl")
@click.option("--server", default=None, metavar="URL", help="Send requests to a running service.")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Flat key=value config file providing flag defaults.")
@click.option("--data-dir", envvar="EMBERCL_DATA_DIR", default=None,
              help="Base directory for relative dataset paths.")
@click.pass_context
def cli(ctx, server, config_path, data_dir):
    """Continual-learning engine for embedding-based VQA."""
    ctx.obj = {
        "server": server,
        "config": load_config_file(config_path) if config_path else {},
        "data_dir": data_dir,
    }


@cli.command("gen-synthetic")
@click.option("--out", "out_path", required=True, help="Output EMB1 path.")
@click.option("--tasks", default=3, show_default=True)
@click.option("--classes-per-task", default=2, show_default=True)
@click.option("--dim-img", default=32, show_default=True)
@click.option("--dim-txt", default=32, show_default=True)
@click.option("--separation", "cluster_separation", default=8.0, show_default=True,
              help="Minimum inter-class mean distance in cluster sigmas.")
@click.option("--drift", "within_class_drift", default=0.0, show_default=True,
              help="Within-class displacement across the stream, in sigmas.")
@click.option("--train-per-class", default=200, show_default=True)
@click.option("--test-per-class", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--prompts/--no-prompts", "write_prompts", default=True, show_default=True,
              help="Also write a class-mean prompt table for zero-shot scoring.")
@click.pass_context
def gen_synthetic(ctx, **kwargs):
    """Generate a synthetic embedding dataset (EMB1 + manifest)."""
    from .schemas import SyntheticResponse

    kwargs = apply_config(ctx, kwargs)
    kwargs["out_path"] = resolve_path(ctx, kwargs["out_path"])
    reply = dispatch(ctx, "/datasets/synthetic", SyntheticRequest(**kwargs), SyntheticResponse)
    click.echo(f"wrote {reply.dataset_path} ({reply.n_records} records: "
               f"{reply.n_train} train / {reply.n_test} test)")
    click.echo(f"manifest: {reply.manifest_path}")
    if reply.prompt_table_path:
        click.echo(f"prompt table: {reply.prompt_table_path}")


@cli.command("validate")
@click.argument("dataset")
@click.option("--expected-json", default=None, type=click.Path(exists=True, dir_okay=False),
              help="JSON file of expected counts.")
@click.option("--floodnet", is_flag=True, help="Check against the published FloodNet counts.")
@click.option("--strict", is_flag=True, help="Exit nonzero on any mismatch.")
@click.pass_context
def validate(ctx, dataset, expected_json, floodnet, strict):
    """Validate an EMB1 dataset's integrity and record counts."""
    expected = json.loads(Path(expected_json).read_text()) if expected_json else None
    req = ValidateRequest(
        dataset_path=resolve_path(ctx, dataset),
        expected=expected,
        use_floodnet_expected=floodnet,
    )
    from .schemas import ValidateResponse

    reply = dispatch(ctx, "/datasets/validate", req, ValidateResponse)
    click.echo(f"counts: {json.dumps(reply.counts, sort_keys=True)}")
    for task, counts in reply.per_task.items():
        click.echo(f"  task {task}: {json.dumps(counts, sort_keys=True)}")
    if reply.mismatches:
        for line in reply.mismatches:
            click.echo(f"mismatch: {line}", err=True)
        if strict:
            raise DataFormatError("count_mismatch", f"{len(reply.mismatches)} count mismatch(es)")
    else:
        click.echo("all expected counts match")


def _parse_order(order: str | None) -> list[int] | None:
    if order is None:
        return None
    try:
        return [int(part) for part in order.split(",") if part.strip() != ""]
    except ValueError as e:
        raise click.UsageError(f"--order must be a comma-separated task-id list: {e}")


@cli.command("train")
@click.argument("dataset")
@click.option("--mode", default="joint", show_default=True,
              type=click.Choice(["joint", "taskwise", "continual", "continual-noreplay"]))
@click.option("--fusion", default="mul", show_default=True, type=click.Choice(["add", "mul", "cat"]))
@click.option("--policy", default="reservoir", show_default=True,
              type=click.Choice(["reservoir", "ring", "mof"]))
@click.option("--order", default=None, help="Comma-separated task ids, e.g. 2,0,1.")
@click.option("--capacity", "per_class_capacity", default=25, show_default=True,
              help="Episodic-memory slots per class.")
@click.option("--replay-batch", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--hidden-dim", default=1024, show_default=True)
@click.option("--hidden-layers", "num_hidden_layers", default=3, show_default=True)
@click.option("--epochs", default=25, show_default=True)
@click.option("--batch-size", default=256, show_default=True)
@click.option("--dropout", "dropout_rate", default=0.2, show_default=True)
@click.option("--first-lr", default=1e-4, show_default=True)
@click.option("--first-wd", default=1e-5, show_default=True)
@click.option("--later-lr", default=5e-6, show_default=True)
@click.option("--later-wd", default=2e-5, show_default=True)
@click.option("--out-dir", default=None, help="Write report/checkpoint files here.")
@click.option("--run-name", default="run", show_default=True)
@click.pass_context
def train(ctx, dataset, order, **kwargs):
    """Train in any mode and print a per-task accuracy table."""
    kwargs = apply_config(ctx, kwargs)
    req = TrainRequest(
        dataset_path=resolve_path(ctx, dataset),
        order=_parse_order(order),
        out_dir=resolve_path(ctx, kwargs.pop("out_dir")),
        **kwargs,
    )
    from .schemas import TrainResponse

    reply = dispatch(ctx, "/runs/train", req, TrainResponse)
    click.echo(reply.table)
    report = reply.report
    if report.get("mean_forgetting") is not None:
        click.echo(f"average accuracy: {report['average_accuracy']:.2f}")
        click.echo(f"mean forgetting:  {report['mean_forgetting']:.2f}")
    click.echo(f"wall clock: {report['wall_clock_seconds']:.2f}s")
    for kind, path in sorted(reply.files.items()):
        click.echo(f"{kind}: {path}")


@cli.command("zeroshot")
@click.argument("dataset")
@click.option("--prompts", "prompts_path", default=None,
              help="Prompt-table EMB1; defaults to the manifest's reference.")
@click.option("--temperature", default=100.0, show_default=True)
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["test", "train", "all"]))
@click.pass_context
def zeroshot(ctx, dataset, prompts_path, temperature, split):
    """Score the dataset against label-prompt embeddings without training."""
    req = ZeroShotRequest(
        dataset_path=resolve_path(ctx, dataset),
        prompts_path=resolve_path(ctx, prompts_path),
        temperature=temperature,
        split=split,
    )
    from .schemas import ZeroShotResponse

    reply = dispatch(ctx, "/runs/zeroshot", req, ZeroShotResponse)
    click.echo(reply.table)
    click.echo(f"overall: {reply.overall:.2f}")


@cli.command("sweep")
@click.argument("dataset")
@click.option("--seed", default=0, show_default=True, help="Master seed; runs use child seeds.")
@click.option("--parallel/--serial", default=False, show_default=True)
@click.option("--policies", default=None, help="Comma-separated subset, e.g. reservoir,ring.")
@click.option("--allow-n", "allow_any_task_count", is_flag=True,
              help="Allow task counts other than 3.")
@click.option("--fusion", default="mul", show_default=True, type=click.Choice(["add", "mul", "cat"]))
@click.option("--capacity", "per_class_capacity", default=25, show_default=True)
@click.option("--replay-batch", default=64, show_default=True)
@click.option("--hidden-dim", default=1024, show_default=True)
@click.option("--hidden-layers", "num_hidden_layers", default=3, show_default=True)
@click.option("--epochs", default=25, show_default=True)
@click.option("--batch-size", default=256, show_default=True)
@click.option("--dropout", "dropout_rate", default=0.2, show_default=True)
@click.option("--first-lr", default=1e-4, show_default=True)
@click.option("--first-wd", default=1e-5, show_default=True)
@click.option("--later-lr", default=5e-6, show_default=True)
@click.option("--later-wd", default=2e-5, show_default=True)
@click.option("--out-dir", default=None, help="Write the 18 reports and the aggregate here.")
@click.pass_context
def sweep(ctx, dataset, policies, **kwargs):
    """Run every task-order permutation under every memory policy."""
    kwargs = apply_config(ctx, kwargs)
    req = SweepRequest(
        dataset_path=resolve_path(ctx, dataset),
        policies=policies.split(",") if policies else None,
        out_dir=resolve_path(ctx, kwargs.pop("out_dir")),
        **kwargs,
    )
    from .schemas import SweepResponse

    reply = dispatch(ctx, "/runs/sweep", req, SweepResponse)
    click.echo(reply.table)
    click.echo("policy ranking (mean final average accuracy):")
    for row in reply.policy_ranking:
        click.echo(f"  {row['policy']}: {row['mean_average_accuracy']:.2f}")
    for kind, path in sorted(reply.files.items()):
        click.echo(f"{kind}: {path}")


@cli.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.UsageError as e:
        click.echo(f"usage error: {e.format_message()}", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    except RemoteError as e:
        click.echo(f"server error: {e}", err=True)
        return e.exit_code
    except DataFormatError as e:
        click.echo(f"data error [{e.code}]: {e}", err=True)
        return EXIT_DATA
    except FileNotFoundError as e:
        click.echo(f"data error [missing_file]: {e}", err=True)
        return EXIT_DATA
    except NumericFailureError as e:
        click.echo(f"numeric failure: {e}", err=True)
        return EXIT_NUMERIC
    except SyntheticSpecError as e:
        click.echo(f"usage error: {e}", err=True)
        return EXIT_USAGE
    except (ModeMismatchError, ValueError) as e:
        click.echo(f"usage error: {e}", err=True)
        return EXIT_USAGE
    except EngineError as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

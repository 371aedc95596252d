"""Command-line client: run experiments, sweep a parameter, or serve HTTP.

`run` and `sweep` execute in-process by default; pass --server URL to send
the same validated configuration to a remote feddwa service instead.

Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import runner
from .config import SWEEP_AXES, RunConfig, parse_config
from .errors import ConfigError, FedDwaError

GUIDANCE_NAMES = {
    "onestep": "one_step_ahead",
    "last": "last_iteration",
    "current": "current",
}


def _add_common_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="YAML config file; flags override its values")
    parser.add_argument("--method",
                        choices=["feddwa", "fedavg", "fedprox", "local", "fedavg_ft"])
    parser.add_argument("--clients", type=int, help="number of clients N")
    parser.add_argument("--rounds", type=int, help="communication rounds T")
    parser.add_argument("--frac", type=float, help="participation fraction per round")
    parser.add_argument("--k", type=int, help="top-K collaborators per client")
    parser.add_argument("--alpha", type=float, help="Dirichlet concentration")
    parser.add_argument("--s", type=float, help="dominant-class fraction")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory (default under $FEDDWA_OUT)")
    parser.add_argument("--export-weights", action="store_true", default=None,
                        help="write weights_<round>.csv for each round")
    parser.add_argument("--guidance", choices=sorted(GUIDANCE_NAMES),
                        help="guidance model mode")
    parser.add_argument("--adapt-steps", type=int, help="guidance adaptation epochs")
    parser.add_argument("--server", help="URL of a feddwa service to run against")


def _overrides_from_args(args) -> dict:
    overrides: dict = {}
    direct = {
        "method": args.method,
        "clients": args.clients,
        "rounds": args.rounds,
        "fraction": args.frac,
        "k": args.k,
        "seed": args.seed,
        "out": args.out,
        "export_weights": args.export_weights,
    }
    for key, value in direct.items():
        if value is not None:
            overrides[key] = value
    data = {}
    if args.alpha is not None:
        data["alpha"] = args.alpha
    if args.s is not None:
        data["dominant_fraction"] = args.s
    if data:
        overrides["data"] = data
    guidance = {}
    if args.guidance is not None:
        guidance["mode"] = GUIDANCE_NAMES[args.guidance]
    if args.adapt_steps is not None:
        guidance["adapt_steps"] = args.adapt_steps
    if guidance:
        overrides["guidance"] = guidance
    return overrides


def _build_config(args) -> RunConfig:
    return parse_config(args.config, _overrides_from_args(args))


def _post(server: str, path: str, payload: dict) -> dict:
    import httpx

    response = httpx.post(server.rstrip("/") + path, json=payload, timeout=None)
    if response.status_code == 422:
        raise ConfigError(str(response.json().get("detail", response.text)))
    if response.status_code != 200:
        raise FedDwaError(f"server returned {response.status_code}: {response.text}")
    return response.json()


def _cmd_run(args) -> int:
    config = _build_config(args)
    if args.server:
        payload = {"config": config.model_dump(exclude_unset=True)}
        body = _post(args.server, "/runs", payload)
        print(json.dumps(body["summary"], sort_keys=True, indent=2))
        print(f"artifacts: {body['out_dir']} (on server)")
        return 0
    outputs = runner.run_experiment(config)
    print(json.dumps(outputs.summary, sort_keys=True, indent=2))
    print(f"artifacts: {outputs.out_dir}")
    return 0


def _parse_values(raw: str) -> list[float]:
    try:
        values = [float(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"--values must be a comma-separated number list, got {raw!r}") from None
    if not values:
        raise ConfigError("--values must contain at least one value")
    return values


def _cmd_sweep(args) -> int:
    config = _build_config(args)
    values = _parse_values(args.values)
    if args.server:
        payload = {
            "config": config.model_dump(exclude_unset=True),
            "axis": args.axis,
            "values": values,
        }
        body = _post(args.server, "/sweeps", payload)
        rows, out_dir = body["rows"], body["out_dir"]
    else:
        rows, out_dir = runner.run_sweep(config, args.axis, values)
    for row in rows:
        acc = row["best_mean_accuracy"]
        acc_text = "-" if acc is None else f"{acc:.4f}"
        print(f"{args.axis}={row['value']}: {row['status']} best_acc={acc_text}")
    print(f"artifacts: {out_dir}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="feddwa",
                                     description="personalized federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="execute one experiment")
    _add_common_flags(run_parser)

    sweep_parser = sub.add_parser("sweep", help="run one experiment per axis value")
    _add_common_flags(sweep_parser)
    sweep_parser.add_argument("--axis", required=True, choices=list(SWEEP_AXES))
    sweep_parser.add_argument("--values", required=True,
                              help="comma-separated values, e.g. 1,2,5")

    serve_parser = sub.add_parser("serve", help="start the HTTP service")
    serve_parser.add_argument("--host", default="127.0.0.1")
    serve_parser.add_argument("--port", type=int, default=8000)

    args = parser.parse_args(argv)
    commands = {"run": _cmd_run, "sweep": _cmd_sweep, "serve": _cmd_serve}
    try:
        return commands[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except FedDwaError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

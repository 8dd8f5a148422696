"""Command-line client for the experiment service.

The CLI reads configs and writes result files; all computation happens in
the service.  By default the service app runs in-process (no socket); pass
``--server URL`` to talk to a remote instance started with, for example,
``uvicorn moesim.service:app``.

Exit codes: 0 success, 2 config error, 3 verification failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import asyncio
import datetime
import json
import sys
from pathlib import Path

import httpx

from . import __version__
from .config import ConfigError, apply_overrides, load_config
from .experiment import render_report_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_IO = 4


def _post(server: str | None, path: str, payload: dict) -> httpx.Response:
    async def go() -> httpx.Response:
        if server:
            async with httpx.AsyncClient(base_url=server, timeout=600.0) as client:
                return await client.post(path, json=payload)
        from .service import app  # imported lazily; FastAPI is not needed for --help

        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://moesim.local", timeout=None
        ) as client:
            return await client.post(path, json=payload)

    return asyncio.run(go())


def _detail(response: httpx.Response) -> str:
    try:
        detail = response.json()["detail"]
    except (ValueError, KeyError):
        return response.text
    if isinstance(detail, list):  # pydantic validation errors
        first = detail[0]
        loc = ".".join(str(p) for p in first.get("loc", []) if p not in ("body", "config"))
        return f"{loc}: {first.get('msg', 'invalid value')}"
    return str(detail)


def _load_with_overrides(args):
    config = load_config(args.config)
    strategies = args.strategies.split(",") if getattr(args, "strategies", None) else None
    return apply_overrides(config, seed=getattr(args, "seed", None), strategies=strategies)


def cmd_run(args) -> int:
    config = _load_with_overrides(args)
    response = _post(args.server, "/run", {"config": config.model_dump(mode="json")})
    if response.status_code == 422:
        print(f"config error: {_detail(response)}", file=sys.stderr)
        return EXIT_CONFIG
    response.raise_for_status()
    body = response.json()

    report_path = Path(config.output.report_path)
    trace_path = Path(config.output.trace_path)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / report_path.name
        trace_path = out_dir / trace_path.name
    report_path.write_text(render_report_json(body["report"]))
    trace_path.write_text(body["trace_csv"])
    meta_path = report_path.with_name(report_path.stem + ".meta.json")
    meta_path.write_text(
        json.dumps(
            {
                "written_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                "package_version": __version__,
                "config_file": str(args.config),
                "server": args.server or "in-process",
            },
            indent=2,
        )
        + "\n"
    )

    table = _post(args.server, "/report-table", {"report": body["report"]})
    table.raise_for_status()
    print(table.json()["table"], end="")
    print(f"report:   {report_path}")
    print(f"trace:    {trace_path}")
    print(f"metadata: {meta_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    config = _load_with_overrides(args)
    response = _post(
        args.server,
        "/verify-equivalence",
        {
            "config": config.model_dump(mode="json"),
            "perturb_accumulation": bool(args.perturb_accumulation),
        },
    )
    if response.status_code == 422:
        print(f"config error: {_detail(response)}", file=sys.stderr)
        return EXIT_CONFIG
    response.raise_for_status()
    verdict = response.json()
    if verdict["equivalent"]:
        print(
            f"bitwise equivalent: {verdict['layers_checked']} MoE layers "
            f"across {verdict['frames_checked']} frames"
        )
        return EXIT_OK
    print(
        f"NOT equivalent: max abs discrepancy {verdict['max_abs_diff']:.9e} over "
        f"{verdict['layers_checked']} MoE layers",
        file=sys.stderr,
    )
    return EXIT_VERIFY


def cmd_report(args) -> int:
    try:
        report = json.loads(Path(args.report).read_text())
    except ValueError:
        print(f"i/o error: {args.report} is not valid JSON", file=sys.stderr)
        return EXIT_IO
    response = _post(args.server, "/report-table", {"report": report})
    if response.status_code == 422:
        print(f"i/o error: {args.report}: {_detail(response)}", file=sys.stderr)
        return EXIT_IO
    response.raise_for_status()
    print(response.json()["table"], end="")
    return EXIT_OK


def cmd_flops(args) -> int:
    config = _load_with_overrides(args)
    response = _post(args.server, "/flops", {"config": config.model_dump(mode="json")})
    if response.status_code == 422:
        print(f"config error: {_detail(response)}", file=sys.stderr)
        return EXIT_CONFIG
    response.raise_for_status()
    body = response.json()
    for name, macs in body["macs"].items():
        print(f"{name:<12} {macs:>14} MACs  {2 * macs:>14} FLOPs")
    per_token = body["per_token_macs"]
    verdict = "matched" if per_token["matched"] else "NOT matched"
    print(
        f"per-token    dense {per_token['dense_mlp']} vs moe {per_token['moe_experts']} "
        f"MACs ({verdict})"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moesim",
        description="Simulate MoE-ViT execution strategies on an accelerator cost model.",
    )
    parser.add_argument("--version", action="version", version=f"moesim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_arg=True):
        if config_arg:
            p.add_argument("config", help="YAML experiment config")
            p.add_argument("--seed", type=int, default=None, help="override workload.seed")
        p.add_argument("--server", default=None, help="remote service URL (default: in-process)")

    run_p = sub.add_parser("run", help="simulate all requested strategies and write reports")
    common(run_p)
    run_p.add_argument("--strategies", default=None, help="comma-separated subset to simulate")
    run_p.add_argument("--out", default=None, help="directory for report/trace/metadata files")
    run_p.set_defaults(func=cmd_run)

    verify_p = sub.add_parser(
        "verify-equivalence",
        help="check reordered execution reproduces the reference bitwise",
    )
    common(verify_p)
    verify_p.add_argument(
        "--perturb-accumulation", action="store_true", help=argparse.SUPPRESS
    )
    verify_p.set_defaults(func=cmd_verify)

    report_p = sub.add_parser("report", help="print the summary table of a saved report")
    report_p.add_argument("report", help="path to a report.json written by `run`")
    common(report_p, config_arg=False)
    report_p.set_defaults(func=cmd_report)

    flops_p = sub.add_parser("flops", help="print the analytic FLOP breakdown of a config")
    common(flops_p)
    flops_p.set_defaults(func=cmd_flops)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except httpx.HTTPError as exc:
        print(f"i/o error: service request failed ({exc})", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line client for the experiment service.

Every subcommand builds a request, sends it to the service, and writes the
CSV files the service rendered. By default the app is mounted in-process
(no network, no separate process); `--server URL` points the same requests
at a remote instance, and `efedsim serve` starts one.

Exit codes: 0 success, 1 an assertion or verdict failed (pipeline output
mismatch, failed verification rows), 2 usage or configuration errors.
EFEDSIM_OUT_DIR, when set, overrides the output directory.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
from pathlib import Path

__all__ = ["main"]

_USAGE_EXIT = 2
_FAIL_EXIT = 1


class CliError(Exception):
    """Config or usage failure; maps to exit code 2."""


def _int_list(raw: str) -> list:
    try:
        return [int(part) for part in raw.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from exc


def _float_list(raw: str) -> list:
    try:
        return [float(part) for part in raw.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}") from exc


def _shape(raw: str) -> tuple:
    try:
        rows, cols = raw.lower().split("x", 1)
        return int(rows), int(cols)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {raw!r}") from exc


def _load_matrix_file(path: str) -> list:
    """Raw binary matrix: rows u32 LE, cols u32 LE, rows*cols float64 LE."""
    import numpy as np

    data = Path(path).read_bytes()
    if len(data) < 8:
        raise CliError(f"{path}: too short for a matrix header")
    rows, cols = struct.unpack_from("<II", data, 0)
    expected = 8 + rows * cols * 8
    if len(data) != expected:
        raise CliError(
            f"{path}: header says {rows}x{cols} ({expected} bytes), file has {len(data)}"
        )
    values = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=8)
    return values.reshape(rows, cols).tolist()


class ServiceClient:
    """HTTP client for the experiment service; in-process unless --server."""

    def __init__(self, base_url: str | None = None):
        if base_url:
            import httpx

            self._client = httpx.Client(base_url=base_url, timeout=300.0)
        else:
            from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app())

    def post(self, path: str, payload: dict) -> dict:
        resp = self._client.post(path, json=payload)
        if resp.status_code in (400, 422):
            detail = resp.json().get("detail", resp.text)
            raise CliError(f"request rejected: {detail}")
        resp.raise_for_status()
        return resp.json()


def _read_config_text(path: str | None) -> str:
    if path is None:
        return ""
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from exc


def _emit(files: dict, out_dir: str | None) -> None:
    if out_dir:
        target = Path(out_dir)
        target.mkdir(parents=True, exist_ok=True)
        for name, text in sorted(files.items()):
            (target / name).write_text(text, encoding="utf-8")
        return
    multi = len(files) > 1
    for name, text in sorted(files.items()):
        if multi:
            print(f"== {name} ==")
        print(text, end="")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efedsim",
        description="Partitioned-transformer federation simulator and analytics",
    )
    parser.add_argument("--server", help="base URL of a running service "
                                         "(default: run in-process)")
    parser.add_argument("--config", help="experiment config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="directory for CSV output (default: stdout)")
    parser.add_argument("--format", choices=["csv"], default="csv",
                        help="output format (csv only)")
    parser.add_argument("--dump-config", action="store_true",
                        help="print the effective canonical config and exit")

    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("cost-table", help="memory-read comparison table")
    p.add_argument("--dims", type=_int_list, default=[5, 10, 100, 10000])

    p = sub.add_parser("svd-analyze", help="rank sweep: compression vs energy")
    p.add_argument("--shape", type=_shape, default=(64, 48))
    p.add_argument("--spectrum", choices=["geometric", "power"], default="geometric")
    p.add_argument("--keep-frac", type=float, default=None)
    p.add_argument("--input", help="raw binary matrix file (rows,cols header + f64)")

    p = sub.add_parser("bandwidth", help="bandwidth reduce rate over a ratio grid")
    p.add_argument("--m", type=int, default=3072)
    p.add_argument("--n", type=int, default=768)
    p.add_argument("--t", type=int, default=30)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--ratios", type=_float_list,
                   default=[0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])

    p = sub.add_parser("pipeline-run", help="verification rounds + inference")
    p.add_argument("--rounds", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-9)

    p = sub.add_parser("verify-demo", help="table-based softmax verification")
    p.add_argument("--b", type=int, default=16)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--f-bits", type=_int_list, default=[6, 8, 10])
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--cols", type=int, default=32)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tamper", type=float, default=0.0)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8421)

    return parser


def _dispatch(args, client: ServiceClient) -> dict:
    if args.command == "cost-table":
        return client.post("/v1/cost-table", {"dims": args.dims})
    if args.command == "svd-analyze":
        payload = {
            "rows": args.shape[0],
            "cols": args.shape[1],
            "spectrum": args.spectrum,
            "keep_frac": args.keep_frac,
        }
        if args.input:
            payload["matrix"] = _load_matrix_file(args.input)
        return client.post("/v1/svd-analyze", payload)
    if args.command == "bandwidth":
        return client.post("/v1/bandwidth", {
            "m": args.m, "n": args.n, "t": args.t, "batch": args.batch,
            "ratios": args.ratios,
        })
    if args.command == "pipeline-run":
        return client.post("/v1/pipeline-run", {
            "config_text": _read_config_text(args.config),
            "rounds": args.rounds,
            "tolerance": args.tolerance,
            "seed": args.seed,
        })
    if args.command == "verify-demo":
        return client.post("/v1/verify-demo", {
            "base": args.b, "n_digits": args.k, "f_values": args.f_bits,
            "rows": args.rows, "cols": args.cols, "n_workers": args.workers,
            "tamper": args.tamper,
            "seed": args.seed if args.seed is not None else 0,
        })
    raise CliError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    try:
        if args.command == "serve":
            import uvicorn

            from .service import create_app

            uvicorn.run(create_app(), host=args.host, port=args.port)
            return 0

        client = ServiceClient(args.server)

        if args.dump_config:
            result = client.post("/v1/dump-config", {
                "config_text": _read_config_text(args.config),
                "seed": args.seed,
            })
            print(result["canonical"], end="")
            print(f"# digest={result['digest']}")
            return 0

        if args.command is None:
            parser.print_usage(sys.stderr)
            return _USAGE_EXIT

        result = _dispatch(args, client)
        out_dir = os.environ.get("EFEDSIM_OUT_DIR") or args.out
        _emit(result["files"], out_dir)
        for note in result.get("notes", []):
            print(f"note: {note}", file=sys.stderr)
        return 0 if result["ok"] else _FAIL_EXIT
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())

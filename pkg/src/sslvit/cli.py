"""Command-line entry point: a thin client over the pipeline service.

Without --server the FastAPI app runs in-process (same filesystem, same
determinism); with --server URL the same requests go over HTTP. Reports are
single-line JSON on stdout; human-readable notes go to stderr. Exit codes:
0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys

import httpx

from .config import load_config_file
from .errors import ConfigError
from .retrieval import LOSS_KINDS


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("SSLVIT_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SSLVIT_THREADS must be an integer, got {env!r}") from None
    return 1


def _build_config_doc(args) -> dict:
    doc = load_config_file(args.config) if getattr(args, "config", None) else {}
    seed = getattr(args, "seed", None)
    if seed is not None:
        doc = dict(doc)
        doc["seed"] = seed
    return doc


def _post(server: str | None, path: str, payload: dict) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(path, json=payload)

    from .service import create_app

    async def go():
        # raise_app_exceptions=False lets the app's 500 handler produce the
        # response instead of the exception propagating into the client
        transport = httpx.ASGITransport(app=create_app(), raise_app_exceptions=False)
        async with httpx.AsyncClient(transport=transport, base_url="http://sslvit",
                                     timeout=None) as client:
            return await client.post(path, json=payload)

    return asyncio.run(go())


def _emit(response: httpx.Response) -> int:
    if response.status_code == 200:
        print(json.dumps(response.json(), separators=(",", ":")))
        return 0
    try:
        detail = response.json().get("detail", response.text)
    except ValueError:
        detail = response.text
    _log(f"error ({response.status_code}): {detail}")
    return 2 if response.status_code in (400, 422) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sslvit",
        description="Self-supervised ViT pipeline: synthesize data, pretrain, embed, "
                    "evaluate few-shot classification, and train/evaluate retrieval.")
    parser.add_argument("--server", default=None,
                        help="base URL of a running service; default runs in-process")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker parallelism cap (default 1; env SSLVIT_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="overrides config seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="self-distillation pretraining")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="teacher checkpoint path")
    p.add_argument("--log", default=None, help="training log path (default <out>.log.json)")

    p = sub.add_parser("embed", help="extract an embedding store from a dataset")
    p.add_argument("--model", required=True, help="encoder or retrieval checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--retrieval-head", action="store_true",
                   help="use the retrieval projection (requires a retrieval checkpoint)")

    p = sub.add_parser("fewshot", help="episodic few-shot evaluation with calibration")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--base-emb", required=True, help="base-class embedding store")
    p.add_argument("--novel-emb", required=True, help="novel-class embedding store")
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--query-per-class", type=int, default=15)
    p.add_argument("--tasks", type=int, default=100)

    p = sub.add_parser("retrieval", help="metric-learning fine-tune / Recall@K eval")
    p.add_argument("action", choices=["train", "eval"])
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--loss", choices=list(LOSS_KINDS), default=None)
    p.add_argument("--out", default=None, help="output checkpoint (train only)")
    p.add_argument("--k", type=int, action="append", default=None,
                   help="recall cutoff, repeatable (eval only; default 1 2 4 8)")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = _resolve_threads(args.threads)
        if args.command == "serve":
            import uvicorn

            from .service import create_app
            uvicorn.run(create_app(), host=args.host, port=args.port)
            return 0

        if args.command == "synth":
            payload = {"config": _build_config_doc(args), "out": args.out}
            code = _emit(_post(args.server, "/synth", payload))
            if code == 0:
                _log(f"wrote dataset to {args.out}")
            return code

        if args.command == "pretrain":
            payload = {"config": _build_config_doc(args), "data": args.data,
                       "out": args.out, "log_out": args.log}
            code = _emit(_post(args.server, "/pretrain", payload))
            if code == 0:
                _log(f"wrote teacher checkpoint to {args.out}")
            return code

        if args.command == "embed":
            payload = {"model": args.model, "data": args.data, "out": args.out,
                       "retrieval_head": args.retrieval_head}
            return _emit(_post(args.server, "/embed", payload))

        if args.command == "fewshot":
            payload = {"config": _build_config_doc(args), "base_emb": args.base_emb,
                       "novel_emb": args.novel_emb, "way": args.way, "shot": args.shot,
                       "query_per_class": args.query_per_class, "tasks": args.tasks,
                       "threads": threads}
            return _emit(_post(args.server, "/fewshot", payload))

        if args.command == "retrieval":
            if args.action == "train":
                if args.loss is None:
                    parser.error("retrieval train requires --loss "
                                 f"({', '.join(LOSS_KINDS)})")
                if args.out is None:
                    parser.error("retrieval train requires --out")
                payload = {"config": _build_config_doc(args), "model": args.model,
                           "data": args.data, "loss": args.loss, "out": args.out}
                return _emit(_post(args.server, "/retrieval/train", payload))
            payload = {"config": _build_config_doc(args), "model": args.model,
                       "data": args.data, "ks": args.k or [1, 2, 4, 8],
                       "loss": args.loss}
            return _emit(_post(args.server, "/retrieval/eval", payload))

        parser.error(f"unknown command {args.command!r}")
    except ConfigError as e:
        _log(f"config error: {e}")
        return 2
    except httpx.HTTPError as e:
        _log(f"transport error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

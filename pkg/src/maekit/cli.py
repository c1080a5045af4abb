"""Command-line client for the maekit service.

Every subcommand builds a JSON request and sends it over HTTP: against
``--server URL`` when given, otherwise against an in-process instance of
the service (no socket needed). Exit codes: 0 success, 1 check failure,
2 usage or data error, 3 numeric abort.

A ``--config FILE`` of ``key = value`` lines supplies defaults; explicit
flags override file values. With no ``--out``, runs land under the
``MAEKIT_OUT_ROOT`` environment variable.
"""

from __future__ import annotations

import argparse
import asyncio
import os
import sys
from pathlib import Path

import httpx

OUT_ROOT_ENV = "MAEKIT_OUT_ROOT"

ARCH_KEYS = ("image_size", "patch_size", "enc_dim", "enc_depth", "enc_heads",
             "dec_dim", "dec_depth", "dec_heads", "mlp_ratio")

_MODES = {"linear": "linear_probe", "full": "full_finetune"}


def _parse_config_value(raw: str):
    raw = raw.strip()
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if "," in raw:
        try:
            return [float(part) for part in raw.split(",")]
        except ValueError:
            pass
    return raw


def read_config_file(path: str) -> dict:
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SystemExit(f"error: malformed config line {line!r}")
        values[key.strip()] = _parse_config_value(value)
    return values


def _request(server: str | None, path: str, payload: dict) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(path, json=payload)

    from .service.app import create_app

    async def go():
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport, timeout=None,
                                     base_url="http://maekit.local") as client:
            return await client.post(path, json=payload)

    return asyncio.run(go())


def _build_payload(args, keys: tuple) -> dict:
    file_values = read_config_file(args.config) if args.config else {}
    payload = {k: v for k, v in file_values.items() if k in keys}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            payload[key] = value
    if "arch" in keys:
        arch = {}
        for key in ARCH_KEYS:
            value = getattr(args, f"arch_{key}", None)
            if value is None:
                value = file_values.get(key)
            if value is not None:
                arch[key] = value
        if arch:
            payload["arch"] = arch
    if "out_dir" in keys and "out_dir" not in payload:
        root = os.environ.get(OUT_ROOT_ENV)
        if root:
            payload["out_dir"] = str(Path(root) / args.command)
    if "mode" in payload:
        payload["mode"] = _MODES.get(payload["mode"], payload["mode"])
    return payload


def _call(args, path: str, payload: dict, on_success) -> int:
    try:
        resp = _request(args.server, path, payload)
    except httpx.HTTPError as exc:
        print(f"error: cannot reach service: {exc}", file=sys.stderr)
        return 2
    if resp.status_code == 200:
        return on_success(resp.json())
    try:
        body = resp.json()
    except ValueError:
        body = {}
    kind = body.get("error", "http")
    detail = body.get("detail", resp.text)
    print(f"error ({kind}): {detail}", file=sys.stderr)
    return 3 if kind == "numeric" else 2


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    keys = ("data_dir", "out_dir", "preset", "mask_ratio", "epochs", "batch_size",
            "base_lr", "weight_decay", "warmup_frac", "seed", "arch")
    payload = _build_payload(args, keys)

    def done(body) -> int:
        print(f"pretrained on {body['n_images']} images"
              f" ({body['n_rejected']} rejected), {body['steps']} steps")
        if body["initial_loss"] is not None:
            print(f"step loss: {body['initial_loss']:.6f} -> {body['final_loss']:.6f}")
        print(f"latest checkpoint: {body['latest_ckpt']}")
        print(f"best checkpoint:   {body['best_ckpt']}")
        print(f"run log:           {body['run_log']}")
        return 0

    return _call(args, "/pretrain", payload, done)


def _print_head_summary(body) -> int:
    print(f"{body['metric_name']}: {body['metric_value']:.6f}"
          f" ({body['n_train']} train / {body['n_test']} test)")
    state = "unchanged" if body["backbone_unchanged"] else "CHANGED"
    print(f"backbone checksum {state}: {body['backbone_checksum_after']}")
    print(f"head checkpoint: {body['head_ckpt']}")
    if body.get("finetuned_ckpt"):
        print(f"fine-tuned backbone: {body['finetuned_ckpt']}")
    print(f"metrics report: {body['metrics_file']}")
    return 0


def cmd_probe(args) -> int:
    keys = ("ckpt", "data_dir", "num_classes", "out_dir", "mode", "epochs",
            "batch_size", "base_lr", "seed", "split_ratios", "test_data_dir")
    return _call(args, "/probe", _build_payload(args, keys), _print_head_summary)


def cmd_segment(args) -> int:
    keys = ("ckpt", "data_dir", "out_dir", "mode", "epochs", "batch_size",
            "base_lr", "seed", "split_ratios", "test_data_dir")
    return _call(args, "/segment", _build_payload(args, keys), _print_head_summary)


def cmd_reconstruct(args) -> int:
    keys = ("ckpt", "image", "out_dir", "mask_ratio", "seed")
    payload = _build_payload(args, keys)

    def done(body) -> int:
        print(f"masked {body['n_masked']} of {body['n_patches']} patches"
              f" (kept {body['keep_count']})")
        print(f"original:       {body['original']}")
        print(f"masked:         {body['masked']}")
        print(f"reconstruction: {body['reconstruction']}")
        return 0

    return _call(args, "/reconstruct", payload, done)


def cmd_gradcheck(args) -> int:
    payload = {"include_corrupted": bool(args.include_corrupted)}

    def done(body) -> int:
        for check in body["checks"]:
            status = "PASS" if check["passed"] else "FAIL"
            print(f"{check['op']}\t{check['max_rel_err']:.3e}\t"
                  f"tol {check['tol']:.0e}\t{status}")
        failing = [c["op"] for c in body["checks"] if not c["passed"]]
        if failing:
            print(f"FAILED: {', '.join(failing)}", file=sys.stderr)
            return 1
        print(f"all gradients verified in {body['elapsed_seconds']:.1f}s")
        return 0

    return _call(args, "/gradcheck", payload, done)


def cmd_gen_synthetic(args) -> int:
    keys = ("kind", "n", "size", "seed", "out_dir")
    payload = _build_payload(args, keys)

    def done(body) -> int:
        print(f"wrote {body['n']} {body['kind']} images ({body['size']}x{body['size']})"
              f" under {body['out_dir']}")
        print(f"manifest: {body['manifest']}")
        return 0

    return _call(args, "/synthetic", payload, done)


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("maekit.service.app:app", host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(sub) -> None:
    sub.add_argument("--server", help="service URL; default runs in-process")
    sub.add_argument("--config", help="key = value defaults file")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", dest="out_dir",
                     help=f"output directory (default ${OUT_ROOT_ENV}/<command>)")


def _add_arch_overrides(sub) -> None:
    for key in ARCH_KEYS:
        sub.add_argument(f"--{key.replace('_', '-')}", dest=f"arch_{key}",
                         type=int, default=None, help=argparse.SUPPRESS)


def _add_head_common(sub) -> None:
    sub.add_argument("--ckpt", required=True, dest="ckpt")
    sub.add_argument("--data", required=True, dest="data_dir")
    sub.add_argument("--mode", choices=("linear", "full"), default=None)
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--batch", type=int, default=None, dest="batch_size")
    sub.add_argument("--lr", type=float, default=None, dest="base_lr")
    sub.add_argument("--split-ratios", default=None, dest="split_ratios",
                     type=lambda s: [float(x) for x in s.split(",")])
    sub.add_argument("--test-data", default=None, dest="test_data_dir",
                     help="separate held-out test directory instead of a split")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maekit",
        description="Masked-autoencoder pretraining and downstream heads for"
                    " grayscale images; thin client over the maekit service.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--data", required=True, dest="data_dir")
    p.add_argument("--preset", choices=("desk", "vit-b"), default=None)
    p.add_argument("--mask-ratio", type=float, default=None, dest="mask_ratio")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None, dest="base_lr")
    p.add_argument("--weight-decay", type=float, default=None, dest="weight_decay")
    p.add_argument("--warmup-frac", type=float, default=None, dest="warmup_frac")
    _add_arch_overrides(p)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("probe", help="train a linear classification probe")
    _add_head_common(p)
    p.add_argument("--classes", type=int, required=True, dest="num_classes")
    _add_common(p)
    p.set_defaults(func=cmd_probe)

    p = subs.add_parser("segment", help="train the transposed-conv segmentation head")
    _add_head_common(p)
    _add_common(p)
    p.set_defaults(func=cmd_segment)

    p = subs.add_parser("reconstruct", help="write original/masked/reconstruction images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask-ratio", type=float, default=None, dest="mask_ratio")
    _add_common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = subs.add_parser("gradcheck", help="run the double-precision gradient-check suite")
    p.add_argument("--include-corrupted", action="store_true",
                   help=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("gen-synthetic", help="materialize a synthetic dataset")
    p.add_argument("--kind", required=True, choices=("pretrain", "classify", "segment"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = subs.add_parser("serve", help="run the service under uvicorn")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

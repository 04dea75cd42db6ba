"""Command-line interface.

Exit codes: 0 success, 2 bad input, 3 key-binding mismatch, 4 key-format error.
Settings resolve as: command-line flag > ``DIFFGUARD_*`` environment
variable > JSON config file (``--config``) > mode default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import evaluation as ev
from .backends import BackendError, IdentityEmbedding, load_backends, oracle_backends, toy_backends
from .keyfile import KIND_KEY_E, KIND_KEY_I, KeyContainer, KeyFormatError
from .msi import train_embedding
from .pipelines import (
    KeyBindingError,
    RunConfig,
    anonymize,
    check_binding,
    hide_identity,
    key_e_from_container,
    key_e_to_container,
    key_i_from_container,
    key_i_to_container,
    recover,
)

log = logging.getLogger("diffguard")

EXIT_OK, EXIT_INPUT, EXIT_BINDING, EXIT_FORMAT = 0, 2, 3, 4


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def load_image(path: str | Path) -> torch.Tensor:
    """8-bit RGB file -> float32 tensor ``(3, H, W)`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def save_image(t: torch.Tensor, path: Path) -> None:
    arr = (t.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def _out_path(path: str | Path, overwrite: bool) -> Path:
    p = Path(path)
    if p.exists() and not overwrite:
        raise InputError(f"{p} exists; pass --overwrite to replace it")
    return p


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc


def resolve(name: str, flag, config: dict, cast=float):
    """flag > DIFFGUARD_<NAME> > config file > None (mode default)."""
    if flag is not None:
        return flag
    env = os.environ.get(f"DIFFGUARD_{name.upper()}")
    if env is not None:
        try:
            return cast(env)
        except ValueError as exc:
            raise InputError(f"bad DIFFGUARD_{name.upper()}={env!r}") from exc
    if name in config:
        return cast(config[name])
    return None


def backends_for(choice: str, image: torch.Tensor):
    c, h, w = image.shape
    if choice == "toy":
        return toy_backends((c, h, w))
    if choice == "oracle":
        return oracle_backends(c * h * w)
    if choice.startswith("plugin:"):
        return load_backends(choice[len("plugin:") :])
    raise InputError(f"unknown backend {choice!r}; use oracle, toy or plugin:<model-id>")


def _as_backend_image(image: torch.Tensor, backends) -> torch.Tensor:
    if image.numel() != int(np.prod(backends.image_shape)):
        raise InputError(f"image of shape {tuple(image.shape)} does not fit backend input {backends.image_shape}")
    return image.reshape(backends.image_shape).to(backends.dtype)


def _read_key(path: str, kind: int) -> KeyContainer:
    if not Path(path).is_file():
        raise InputError(f"key file not found: {path}")
    return KeyContainer.read(path, expect_kind=kind)


# --------------------------------------------------------------------------
# commands


def cmd_train_embedding(args) -> int:
    cfg = _load_config(args.config)
    out = _out_path(args.out, args.overwrite)
    image = load_image(args.image)
    backend = resolve("backend", args.backend, cfg, str) or "toy"
    steps = resolve("steps", args.steps, cfg, int)
    lr = resolve("lr", args.lr, cfg, float)
    seed = resolve("seed", args.seed, cfg, int)
    backends = backends_for(backend, image)
    key_e = train_embedding(
        _as_backend_image(image, backends),
        backends,
        steps=500 if steps is None else steps,
        lr=1e-3 if lr is None else lr,
        seed=seed or 0,
    )
    key_e.meta["image_shape"] = list(image.shape)
    key_e_to_container(key_e).write(out)
    print(f"wrote key-E {out}")
    print(f"probe loss: start {key_e.meta['probe_loss_start']:.6f} final {key_e.meta['probe_loss_end']:.6f}")
    return EXIT_OK


def cmd_protect(args) -> int:
    cfg = _load_config(args.config)
    out_dir = Path(args.out_dir)
    image = load_image(args.image)
    key_e = key_e_from_container(_read_key(args.key_e, KIND_KEY_E))
    backends = load_backends(key_e.model_id)
    x = _as_backend_image(image, backends)
    lam = resolve("lambda", args.lam, cfg)
    run = RunConfig(
        mode=args.mode,
        s_ns=resolve("s_ns", args.s_ns, cfg),
        tau=resolve("tau", args.tau, cfg),
        lam=lam,
        seed=resolve("seed", args.seed, cfg, int) or 0,
        stride=resolve("stride", args.stride, cfg, int) or 20,
        force=args.force,
    )
    if args.mode == "hide" and lam == 0:
        print("warning: lambda is 0, identity guidance is disabled", file=sys.stderr)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [_out_path(out_dir / f"protected_{i}.png", args.overwrite) for i in range(run.groups)]
    key_path = _out_path(out_dir / "key_i.dpk", args.overwrite)
    trace_path = _out_path(out_dir / "trace.jsonl", args.overwrite) if args.trace else None
    result = (anonymize if args.mode == "anonymize" else hide_identity)(x, key_e, run, backends)
    shape = key_e.meta.get("image_shape", list(image.shape))
    for img, p in zip(result.images, targets):
        save_image(img.reshape(shape).float(), p)
    key_i_to_container(result.key).write(key_path)
    if trace_path is not None:
        trace_path.write_text("".join(r.to_json() + "\n" for r in result.trail))
    print(f"wrote {len(targets)} protected image(s) and key-I {key_path} (lambda={result.lam:g})")
    return EXIT_OK


def cmd_recover(args) -> int:
    key_i = key_i_from_container(_read_key(args.key_i, KIND_KEY_I))
    key_e = key_e_from_container(_read_key(args.key_e, KIND_KEY_E))
    check_binding(key_i, key_e)
    out = _out_path(args.out, args.overwrite)
    backends = load_backends(key_e.model_id)
    image = recover(key_i, key_e, backends)
    shape = key_e.meta.get("image_shape") or list(backends.image_shape)
    image = image.reshape(shape).float()
    save_image(image, out)
    print(f"wrote recovered image {out}")
    if args.ref:
        ref = load_image(args.ref)
        m = ev.recovery_metrics(ref.permute(1, 2, 0).numpy(), load_image(out).permute(1, 2, 0).numpy())
        print(ev.format_report("recovery", [ev.metrics_row("recovered", m)]))
    return EXIT_OK


def _npz(path: str, *names: str) -> list[np.ndarray]:
    try:
        with np.load(path) as data:
            return [np.asarray(data[n], dtype=np.float64) for n in names]
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read arrays {names} from {path}: {exc}") from exc


def _embs(rows: np.ndarray, eid: str = "input") -> list[IdentityEmbedding]:
    if rows.ndim != 2 or not np.all(np.isfinite(rows)) or np.any(np.linalg.norm(rows, axis=1) == 0):
        raise InputError(f"expected a (n, dim) array of nonzero finite embeddings, got shape {rows.shape}")
    return [IdentityEmbedding.from_raw(r, eid) for r in rows]


def cmd_eval(args) -> int:
    p, inputs = args.protocol, args.inputs
    need = 2 if p == "recovery" else 1
    if len(inputs) != need:
        raise InputError(f"{p} takes {need} input file(s), got {len(inputs)}")
    if p == "sr":
        ref, cand = _npz(inputs[0], "ref", "cand")
        if ref.shape != cand.shape:
            raise InputError(f"ref and cand shapes differ: {ref.shape} vs {cand.shape}")
        rule = ev.RECOGNIZERS[args.recognizer]
        if args.metric or args.threshold is not None:
            rule = ev.Recognizer("custom", args.metric or rule.metric, rule.threshold if args.threshold is None else args.threshold)
        rate = ev.protection_success_rate(list(zip(_embs(ref), _embs(cand))), rule)
        rows = [{"protocol": "sr", "recognizer": rule.name, "metric": rule.metric, "threshold": rule.threshold, "n": len(ref), "rate": rate}]
    elif p == "idrate":
        probe, same, diff = _npz(inputs[0], "probe", "same", "diff")
        if same.ndim != 3 or same.shape[0] != probe.shape[0]:
            raise InputError(f"'same' must be (n_probe, n_same, dim), got {same.shape}")
        vs = ev.VerificationSet(_embs(probe), [_embs(s) for s in same], _embs(diff))
        rows = [{"protocol": "idrate", "probes": len(probe), "same_per_probe": same.shape[1], "diff": len(diff), "rate": ev.identification_rate(vs)}]
    elif p == "recovery":
        a, b = (load_image(x).permute(1, 2, 0).numpy() for x in inputs)
        rows = [ev.metrics_row(Path(inputs[1]).name, ev.recovery_metrics(a, b))]
    else:
        (groups,) = _npz(inputs[0], "groups")
        if groups.ndim != 3:
            raise InputError(f"'groups' must be (n_groups, group_size, dim), got {groups.shape}")
        rows = [{"protocol": "diversity", "groups": groups.shape[0], "dispersion": ev.diversity_dispersion([_embs(g) for g in groups])}]
    print(ev.format_report(p, rows))
    if args.out:
        out = _out_path(args.out, args.overwrite)
        out.write_text(ev.to_records(rows))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffguard", description="Recoverable face privacy protection with guided diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default settings")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    tr = sub.add_parser("train-embedding", parents=[common], help="learn key-E for one image")
    tr.add_argument("image")
    tr.add_argument("--out", required=True)
    tr.add_argument("--backend", help="oracle, toy or plugin:<model-id> (default toy)")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=cmd_train_embedding)

    pr = sub.add_parser("protect", parents=[common], help="anonymize or hide identity; writes images and key-I")
    pr.add_argument("mode", choices=["anonymize", "hide"])
    pr.add_argument("image")
    pr.add_argument("key_e")
    pr.add_argument("--out-dir", required=True)
    pr.add_argument("--tau", type=float)
    pr.add_argument("--s-ns", dest="s_ns", type=float)
    pr.add_argument("--lambda", dest="lam", type=float)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--stride", type=int)
    pr.add_argument("--trace", action="store_true", help="write per-step energy records to trace.jsonl")
    pr.add_argument("--force", action="store_true", help="accept a key-E trained on another image")
    pr.set_defaults(func=cmd_protect)

    rc = sub.add_parser("recover", parents=[common], help="recover the original image from key-I and key-E")
    rc.add_argument("key_i")
    rc.add_argument("key_e")
    rc.add_argument("--out", required=True)
    rc.add_argument("--ref", help="original image; prints recovery metrics")
    rc.set_defaults(func=cmd_recover)

    evp = sub.add_parser("eval", parents=[common], help="evaluation protocols")
    evp.add_argument("protocol", choices=["sr", "idrate", "recovery", "diversity"])
    evp.add_argument("inputs", nargs="+")
    evp.add_argument("--recognizer", choices=sorted(ev.RECOGNIZERS), default="facenet")
    evp.add_argument("--metric", choices=["cosine_distance", "euclidean", "squared_euclidean"])
    evp.add_argument("--threshold", type=float)
    evp.add_argument("--out", help="write line-delimited JSON records here")
    evp.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except KeyFormatError as exc:
        print(f"error: key format: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except KeyBindingError as exc:
        print(f"error: key binding: {exc}", file=sys.stderr)
        return EXIT_BINDING
    except (InputError, BackendError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

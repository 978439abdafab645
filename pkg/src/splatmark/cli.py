"""Command-line entry point: ``splatmark <command> [options]``.

Relative output paths are resolved against ``$SPLATMARK_OUTPUT_DIR`` when it
is set. Errors are reported on stderr with a category, and the exit status
identifies it: 2 config, 3 capacity, 4 corruption, 5 divergence, 6 format.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .codec import as_bits, bits_to_str
from .config import PROFILES, load_run_config
from .distortions import KINDS, apply
from .errors import ConfigError, FormatError, SplatmarkError
from .splat import SCENE_ATTACKS, SceneRenderer, generate_scene, load_scene, save_scene

OUTPUT_ENV = "SPLATMARK_OUTPUT_DIR"
_CATEGORY = {2: "config", 3: "capacity", 4: "corruption", 5: "divergence", 6: "format"}


def output_path(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# -- message and image I/O ------------------------------------------------------

def parse_message(text: str, L: int, hex_input: bool = False) -> np.ndarray:
    text = text.strip()
    if hex_input:
        digits = text[2:] if text.lower().startswith("0x") else text
        if len(digits) * 4 != L:
            raise FormatError(f"hex message has {len(digits) * 4} bits, expected L={L} ({L // 4} hex digits)")
        try:
            value = int(digits, 16)
        except ValueError as exc:
            raise FormatError(f"not a hexadecimal message: {text!r}") from exc
        return as_bits(format(value, f"0{L}b"))
    if len(text) != L or set(text) - {"0", "1"}:
        raise FormatError(f"message must be {L} characters of 0/1, got {text!r}")
    return as_bits(text)


def format_message(bits, hex_output: bool = False) -> str:
    s = bits_to_str(bits)
    if hex_output:
        if len(s) % 4:
            raise FormatError(f"cannot print {len(s)} bits as hex")
        return format(int(s, 2), f"0{len(s) // 4}x")
    return s


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path, allow_pickle=False).astype(np.float32)
    elif path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:
            raise FormatError("reading PNG needs Pillow; use .npy images instead") from exc
        img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    else:
        raise FormatError(f"{path}: unsupported image type (use .npy or .png)")
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"{path}: expected an (H, W, 3) image, got {img.shape}")
    return img


def save_image(path, image) -> None:
    img = np.asarray(torch.as_tensor(image).detach().cpu(), dtype=np.float32)
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(np.round(img.clip(0, 1) * 255).astype(np.uint8)).save(path)
    else:
        np.save(path, img)


# -- config from flags ----------------------------------------------------------

def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    put("codec", "L", args.bits)
    put("codec", "n", args.chunk_bits)
    put("decoder", "n", args.chunk_bits)
    put("decoder", "G", args.groups)
    put("sampler", "K", args.buffer_size)
    put("sampler", "freeze_epoch", args.freeze_epoch)
    put("sampler", "epochs", args.epochs)
    put("sampler", "sigma", args.hard_sigma)
    put("sampler", "tau0", args.tau0)
    put("sampler", "alpha", args.alpha)
    put("sampler", "mode", args.sampler_mode)
    put("seeds", "codec", args.seed_codec)
    put("seeds", "encoder", args.seed_encoder)
    put("seeds", "train", args.seed_train)
    put("embed", "epochs", args.embed_epochs)
    put("protocol", "mode", args.protocol)
    put("protocol", "sample_count", args.samples)
    if args.profile is not None:
        o["profile"] = args.profile
    return o


def _config(args):
    return load_run_config(args.config, _overrides(args))


def _config_for_checkpoint(args, ckpt):
    """Run config whose payload matches the checkpoint (flags still apply)."""
    o = _overrides(args)
    o.setdefault("codec", {})["L"] = ckpt.L
    o["codec"]["n"] = ckpt.cfg.codec.n
    o.setdefault("decoder", {}).update({"n": ckpt.cfg.decoder.n, "G": ckpt.cfg.decoder.G})
    return load_run_config(args.config, o)


# -- commands --------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    from .pretrain import pretrain, save_checkpoint

    cfg = _config(args)
    out = output_path(args.out)
    log_path = out.with_suffix(".log.jsonl")
    with open(log_path, "w") as log:
        def progress(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
            if not args.quiet:
                print(f"epoch {rec['epoch']:4d}  loss {rec['loss_total']:.4f}  in-acc {rec['in_bit_acc']:.4f}  "
                      f"hard {rec['hard_fraction']:.3f}", file=sys.stderr)

        result = pretrain(cfg.pretrain, progress=progress)
    save_checkpoint(out, result, extra={"run_config": cfg.to_dict()})
    print(out)
    return 0


def cmd_embed(args) -> int:
    from .embed import embed, save_embedding
    from .pretrain import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    cfg = _config_for_checkpoint(args, ckpt)
    scene = load_scene(args.scene)
    bits = parse_message(args.message, ckpt.L, args.hex)

    def progress(rec):
        if not args.quiet:
            print(f"epoch {rec['epoch']:4d}  clean-acc {rec['clean_bit_acc']:.4f}  psnr {rec['psnr']:.2f}",
                  file=sys.stderr)

    result = embed(scene, bits, ckpt, cfg.embed, progress=progress)
    result.manifest["run_config"] = cfg.to_dict()
    out = output_path(args.out)
    save_embedding(out, result)
    if args.image_out:
        with torch.no_grad():
            save_image(output_path(args.image_out), SceneRenderer(scene)(torch.from_numpy(result.offsets)))
    print(json.dumps({k: result.manifest[k] for k in ("clean_bit_acc", "psnr", "ssim", "message_digest")},
                     sort_keys=True))
    return 0


def cmd_extract(args) -> int:
    from .embed import extract
    from .pretrain import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    if image.min() < 0 or image.max() > 1:
        raise FormatError(f"{args.image}: pixel values must lie in [0, 1]")
    print(format_message(extract(image, ckpt), args.hex))
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args)
    out = output_path(args.out)
    rng = np.random.default_rng(cfg.seeds["train"])
    if args.kind in SCENE_ATTACKS:
        if not args.scene:
            raise ConfigError(f"attack {args.kind!r} acts on a scene; pass --scene")
        scene = load_scene(args.scene)
        if args.offsets:
            from .embed import load_embedding

            scene = scene.with_offsets(load_embedding(args.offsets).offsets)
        params = {"prune": cfg.protocol.prune_ratio, "clone": cfg.protocol.clone_ratio,
                  "noise3d": cfg.protocol.noise_sigma}
        attacked = SCENE_ATTACKS[args.kind](scene, params[args.kind], rng)
        if out.suffix == ".json":
            save_scene(out, attacked)
        else:
            save_image(out, SceneRenderer(attacked)())
    else:
        if not args.image:
            raise ConfigError(f"distortion {args.kind!r} acts on an image; pass --image")
        image = torch.from_numpy(load_image(args.image))
        gen = torch.Generator().manual_seed(cfg.seeds["train"])
        save_image(out, apply(image, args.kind, cfg.embed.distortion, gen))
    print(out)
    return 0


def cmd_evaluate(args) -> int:
    from .evaluate import evaluate_decoder, format_report, report_json, run_protocol
    from .pretrain import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    cfg = _config_for_checkpoint(args, ckpt)
    if args.decoder_only:
        p = cfg.protocol
        report = {"format": "splatmark-decoder-report", "protocol": p.to_dict(), "seeds": ckpt.meta["seeds"],
                  "decoder_hash": ckpt.decoder_hash, "message_bits": ckpt.L,
                  "accuracy": evaluate_decoder(ckpt, p.mode, p.sample_count, p.seed)}
        text = json.dumps(report["accuracy"], sort_keys=True) + "\n"
        body = json.dumps(report, sort_keys=True, indent=1) + "\n"
    else:
        if not args.scene:
            raise ConfigError("full-pipeline evaluation needs --scene (or pass --decoder-only)")
        report = run_protocol(ckpt, load_scene(args.scene), cfg.protocol, cfg.embed)
        report["run_config"] = cfg.to_dict()
        text, body = format_report(report), report_json(report)
    out = output_path(args.out)
    out.write_text(body)
    sys.stdout.write(text)
    return 0


def cmd_gen_scene(args) -> int:
    cfg = _config(args)
    s = cfg.scene
    scene = generate_scene(args.count or s.count, args.height or s.height, args.width or s.width, cfg.seeds["train"])
    out = output_path(args.out)
    save_scene(out, scene)
    print(out)
    return 0


# -- parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--profile", choices=PROFILES, help="decoder width profile (desk: reduced, full: reference)")
    p.add_argument("--bits", type=int, help="message length L")
    p.add_argument("--chunk-bits", type=int, help="compression rate n (bits per token)")
    p.add_argument("--groups", type=int, help="bit-branch group count G")
    p.add_argument("--buffer-size", type=int, help="sampler buffer capacity K")
    p.add_argument("--epochs", type=int, help="pre-training epochs")
    p.add_argument("--freeze-epoch", type=int, help="epoch after which the buffer is frozen to the hardest K")
    p.add_argument("--hard-sigma", type=float, help="accuracy threshold below which a message is hard")
    p.add_argument("--tau0", type=float, help="initial hard ratio")
    p.add_argument("--alpha", type=float, help="per-epoch growth of the hard ratio")
    p.add_argument("--sampler-mode", choices=("hms", "fixed"), help="fixed = one random buffer (ablation)")
    p.add_argument("--seed-codec", type=int)
    p.add_argument("--seed-encoder", type=int)
    p.add_argument("--seed-train", type=int)
    p.add_argument("--embed-epochs", type=int)
    p.add_argument("--protocol", choices=("In", "Out", "Random"))
    p.add_argument("--samples", type=int, help="messages per protocol")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--hex", action="store_true", help="messages are hexadecimal")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatmark", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the decoder, write a checkpoint")
    _common(p)
    p.add_argument("--out", default="decoder.npz")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="write a message into a scene")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--message", required=True, help="0/1 string (or hex with --hex)")
    p.add_argument("--out", default="embedding.npz")
    p.add_argument("--image-out", help="also save the watermarked render (.npy or .png)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="read the message from an image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("attack", help="apply a scene attack or an image distortion")
    _common(p)
    p.add_argument("--attack", "--kind", dest="kind", required=True, choices=sorted(SCENE_ATTACKS) + list(KINDS))
    p.add_argument("--scene")
    p.add_argument("--offsets", help="embedding artifact to bake into the scene first")
    p.add_argument("--image")
    p.add_argument("--out", required=True, help=".json scene, or .npy/.png image")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="run an In/Out/Random protocol and write a report")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene")
    p.add_argument("--decoder-only", action="store_true", help="score the decoder on text embeddings only")
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gen-scene", help="write a seeded procedural scene")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--out", default="scene.json")
    p.set_defaults(func=cmd_gen_scene)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SplatmarkError as exc:
        print(f"error ({_CATEGORY.get(exc.exit_code, 'runtime')}): {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

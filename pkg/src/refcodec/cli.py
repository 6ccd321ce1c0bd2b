"""Command-line surface: train, encode, decode, select-ref, analyze, eval.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 config or
reference-set mismatch.  The REMAC_BACKEND environment variable overrides the
--backend flag.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .bitstream import ConfigMismatchError, FormatError, RmcFile, decode_image, encode_image
from .networks import load_model, save_model
from .rans import get_coder
from .rans._pure import StreamError
from .selector import (
    ReferenceSet,
    StaleCacheError,
    build_cache,
    select_deep,
    select_deep_recycled,
    select_shallow,
    selection_accuracy,
)
from .tensors import ContractError, ImageTensor, load_png, pad_image, save_png
from .trainer import ConfigError, parse_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CONFIG = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def _build_parser() -> _Parser:
    p = _Parser(prog="refcodec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_backend(sp):
        sp.add_argument("--backend", choices=("reference", "accelerated"), default="reference")

    tr = sub.add_parser("train", help="train codec models")
    tr.add_argument("--config", help="key=value config file")
    tr.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    tr.add_argument("--data", required=True, help="directory of training PNGs")
    tr.add_argument("--refset", required=True, help="reference image directory")
    tr.add_argument("--out", required=True, help="output checkpoint path")
    tr.add_argument("--stage", choices=("base", "pretrain", "finetune", "full"), default="full")
    tr.add_argument("--base-model", help="existing base checkpoint (pretrain/finetune stages)")
    tr.add_argument("--model-in", help="existing pretrained checkpoint (finetune stage)")
    tr.add_argument("--log", help="write the loss log CSV here")
    tr.add_argument("--seed", type=int)

    en = sub.add_parser("encode", help="compress one image to a .rmc stream")
    en.add_argument("-i", "--input", required=True)
    en.add_argument("--model", required=True)
    en.add_argument("--refset", required=True)
    en.add_argument("-o", "--output", required=True)
    en.add_argument("--base-model", help="pre-encoder checkpoint for shallow selection")
    en.add_argument("--block-mode", action="store_true")
    en.add_argument("--seed", type=int, default=0)
    add_backend(en)

    de = sub.add_parser("decode", help="decompress a .rmc stream")
    de.add_argument("input")
    de.add_argument("--model", required=True)
    de.add_argument("--refset", required=True)
    de.add_argument("-o", "--output", required=True)
    add_backend(de)

    se = sub.add_parser("select-ref", help="report the selected reference indices")
    se.add_argument("-i", "--input", required=True)
    se.add_argument("--model", required=True)
    se.add_argument("--refset", required=True)
    se.add_argument("--base-model")
    se.add_argument("--recycled", action="store_true", help="use recycled deep selection")

    an = sub.add_parser("analyze", help="texture/color similarity reports")
    an.add_argument("--images", required=True)
    an.add_argument("--mode", choices=("glcm_hist", "chroma_violin_data"), required=True)
    an.add_argument("-o", "--output", required=True)

    ev = sub.add_parser(
        "eval", help="R-D sweep (+SVG), BD table, MAC report, selection accuracy"
    )
    ev.add_argument("--models", nargs="+", required=True)
    ev.add_argument("--testset", required=True)
    ev.add_argument("--refset", required=True)
    ev.add_argument("--out-dir", required=True)
    ev.add_argument("--base-model")
    ev.add_argument("--noise-sigmas", default="5,10,15")
    ev.add_argument("--block-degrade", action="store_true", help="add the 8x8 blocky perturbation")
    ev.add_argument("--seed", type=int, default=0)
    add_backend(ev)
    return p


def _load_images(path) -> list[ImageTensor]:
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise ContractError(f"no PNG images under {path}")
    return [load_png(f) for f in files]


def _coder_from(args):
    name = os.environ.get("REMAC_BACKEND", args.backend)
    return get_coder(name)


def _select_refs(model, base_model, img, refset, cache):
    """(deep index, shallow index) for one input image.

    With a base model: shallow via stage-1 pre-encoder features, deep via the
    recycled rule on the codec's own latent.  Without one, both indices come
    from recycled deep selection.
    """
    import torch

    from .networks import encode_features

    with torch.no_grad():
        y = encode_features(model, img)
    q = select_deep_recycled(y, cache, model)
    if base_model is None:
        return q, q
    j = select_shallow(img, refset, cache, base_model)
    return q, j


def cmd_train(args) -> int:
    from . import trainer
    from .selector import build_triplets

    text = Path(args.config).read_text() if args.config else ""
    overrides = dict(kv.split("=", 1) for kv in args.override)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    config = parse_config(text, overrides)

    dataset = _load_images(args.data)
    refset = ReferenceSet.from_dir(args.refset)

    base = load_model(args.base_model) if args.base_model else None
    out = Path(args.out)

    if args.stage in ("base", "full") and base is None:
        base, state = trainer.train_base(config, dataset)
        if args.stage == "base":
            save_model(base, out)
            if args.log:
                state.write_csv(args.log)
            return EXIT_OK
        save_model(base, out.with_suffix(".base.ckpt"))
    if base is None:
        raise UsageError(f"--base-model is required for the {args.stage} stage")

    cache = build_cache(base, base, refset)
    triplets = build_triplets(dataset, refset, "pretrain", base, base, cache=cache)

    if args.stage == "finetune":
        model = load_model(args.model_in) if args.model_in else None
        if model is None:
            raise UsageError("--model-in is required for the finetune stage")
    else:
        model, state = trainer.pretrain_codec(config, triplets, base, dataset, refset)
        if args.stage == "pretrain":
            save_model(model, out)
            if args.log:
                state.write_csv(args.log)
            return EXIT_OK
        save_model(model, out.with_suffix(".pretrain.ckpt"))

    model, state, _ = trainer.finetune_recycled(
        model, config, dataset, refset, triplets
    )
    save_model(model, out)
    if args.log:
        state.write_csv(args.log)
    return EXIT_OK


def cmd_encode(args) -> int:
    import torch

    torch.manual_seed(args.seed)
    model = load_model(args.model)
    model.eval()
    refset = ReferenceSet.from_dir(args.refset)
    base = load_model(args.base_model) if args.base_model else None
    img = load_png(args.input)
    if args.block_mode:
        from .bitstream import BLOCK_H, BLOCK_W
        from .tensors import resize_to

        # selection runs at tile scale so no full-frame activation is ever live
        sel_img = pad_image(resize_to(img.cropped(), BLOCK_H, BLOCK_W))
    else:
        sel_img = img
    dims = (sel_img.padded_h, sel_img.padded_w)
    cache = build_cache(model, base, refset, dims=dims)
    i, j = _select_refs(model, base, sel_img, refset, cache)
    rmc = encode_image(
        model,
        img,
        (i, j),
        refset,
        refcache=None,
        coder=_coder_from(args),
        block_mode=args.block_mode,
    )
    Path(args.output).write_bytes(rmc.pack())
    print(
        f"encoded {args.input}: {rmc.payload_bits} payload bits "
        f"(estimate {rmc.stats.estimated_bits:.0f}), refs i={i} j={j}"
    )
    return EXIT_OK


def cmd_decode(args) -> int:
    model = load_model(args.model)
    model.eval()
    refset = ReferenceSet.from_dir(args.refset)
    rmc = RmcFile.parse(Path(args.input).read_bytes())
    rec = decode_image(model, rmc, refset, coder=_coder_from(args))
    save_png(rec, args.output)
    print(f"decoded {args.input} -> {args.output} ({rec.true_w}x{rec.true_h})")
    return EXIT_OK


def cmd_select_ref(args) -> int:
    model = load_model(args.model)
    model.eval()
    refset = ReferenceSet.from_dir(args.refset)
    base = load_model(args.base_model) if args.base_model else None
    img = load_png(args.input)
    cache = build_cache(model, base, refset, dims=(img.padded_h, img.padded_w))
    if args.recycled or base is None:
        i, j = _select_refs(model, base, img, refset, cache)
        mode = "recycled"
    else:
        i = select_deep(img, refset, cache, base)
        j = select_shallow(img, refset, cache, base)
        mode = "pretrain"
    print(json.dumps({"deep": i, "shallow": j, "mode": mode}))
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import corpus_report

    images = [im.cropped() for im in _load_images(args.images)]
    csv_text = corpus_report(images, args.mode)
    Path(args.output).write_text(csv_text)
    print(f"wrote {args.output} ({len(csv_text.splitlines()) - 1} rows)")
    return EXIT_OK


def perturb_gaussian(img: ImageTensor, sigma_8bit: float, seed: int) -> ImageTensor:
    """Additive Gaussian sensor noise at an 8-bit-scale sigma."""
    rng = np.random.default_rng(seed)
    noisy = img.cropped() + rng.normal(0.0, sigma_8bit / 255.0, img.cropped().shape)
    return pad_image(np.clip(noisy, 0.0, 1.0).astype(np.float32))


def perturb_blocks(img: ImageTensor, levels: int = 12) -> ImageTensor:
    """8x8 blockwise re-quantization: a blocky-artifact proxy for codec damage."""
    data = img.cropped().copy()
    _, h, w = data.shape
    for top in range(0, h, 8):
        for left in range(0, w, 8):
            block = data[:, top : top + 8, left : left + 8]
            mean = block.mean(axis=(1, 2), keepdims=True)
            q = np.rint((block - mean) * levels) / levels + mean
            data[:, top : top + 8, left : left + 8] = q
    return pad_image(np.clip(data, 0.0, 1.0).astype(np.float32))


def _selection_table(model, base, testset, refset, cache, sigmas, block_degrade, seed):
    clean = [_select_refs(model, base, img, refset, cache) for img in testset]
    clean_deep = [c[0] for c in clean]
    clean_shallow = [c[1] for c in clean]
    rows = [["perturbation", "deep_accuracy", "shallow_accuracy"]]
    rows.append(["none", "100.0", "100.0"])
    for sigma in sigmas:
        pert = [
            _select_refs(model, base, perturb_gaussian(img, sigma, seed + k), refset, cache)
            for k, img in enumerate(testset)
        ]
        rows.append(
            [
                f"gaussian_sigma_{sigma:g}",
                f"{selection_accuracy(clean_deep, [p[0] for p in pert]):.2f}",
                f"{selection_accuracy(clean_shallow, [p[1] for p in pert]):.2f}",
            ]
        )
    if block_degrade:
        pert = [_select_refs(model, base, perturb_blocks(img), refset, cache) for img in testset]
        rows.append(
            [
                "block_8x8",
                f"{selection_accuracy(clean_deep, [p[0] for p in pert]):.2f}",
                f"{selection_accuracy(clean_shallow, [p[1] for p in pert]):.2f}",
            ]
        )
    return "\n".join(",".join(r) for r in rows) + "\n"


def cmd_eval(args) -> int:
    from .metrics import bd_metric, flops_report, flops_report_text, rd_sweep, RDCurve

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    coder = _coder_from(args)
    testset = _load_images(args.testset)
    refset = ReferenceSet.from_dir(args.refset)
    base = load_model(args.base_model) if args.base_model else None

    models = []
    for path in args.models:
        m = load_model(path)
        m.eval()
        dims = (testset[0].padded_h, testset[0].padded_w)
        cache = build_cache(m, base, refset, dims=dims)
        chooser = (lambda mm, cc: lambda img: _select_refs(mm, base, img, refset, cc))(m, cache)
        models.append((Path(path).stem, m.lmbda, m, chooser))

    curve, csv_text = rd_sweep(models, testset, refset, coder=coder, base_model=base)
    (out_dir / "rd_sweep.csv").write_text(csv_text)
    artifacts = ["rd_sweep.csv"]
    if len(models) >= 2:
        from .metrics import write_rd_svg

        write_rd_svg(csv_text, out_dir / "rd_sweep.svg")
        artifacts.append("rd_sweep.svg")

    if curve is not None and len(curve.points) >= 4:
        anchor = RDCurve("anchor", curve.points)
        bd_text = (
            f"BD report (anchor = this sweep itself; self-check values)\n"
            f"bd_psnr_db: {bd_metric(anchor, curve, 'quality'):+.4f}\n"
            f"bd_rate_pct: {bd_metric(anchor, curve, 'rate'):+.4f}\n"
        )
        (out_dir / "bd_report.txt").write_text(bd_text)
        artifacts.append("bd_report.txt")

    model0 = models[0][2]
    base_cfg = base.cfg if base is not None else model0.cfg
    h, w = testset[0].padded_h, testset[0].padded_w
    report = flops_report(model0.cfg, base_cfg, w, h, "recycled_pipeline", n_refs=len(refset))
    (out_dir / "flops_report.txt").write_text(flops_report_text(report))
    artifacts.append("flops_report.txt")

    sigmas = [float(s) for s in args.noise_sigmas.split(",") if s]
    dims = (testset[0].padded_h, testset[0].padded_w)
    cache0 = build_cache(model0, base, refset, dims=dims)
    table = _selection_table(
        model0, base, testset, refset, cache0, sigmas, args.block_degrade, args.seed
    )
    (out_dir / "selection_accuracy.csv").write_text(table)
    artifacts.append("selection_accuracy.csv")

    manifest = {
        "artifacts": artifacts,
        "models": [str(p) for p in args.models],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(artifacts)} artifacts under {out_dir}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "select-ref": cmd_select_ref,
    "analyze": cmd_analyze,
    "eval": cmd_eval,
}


def dispatch(argv: list[str]) -> int:
    """Route argv to a subcommand, mapping failures onto the exit-code contract."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigMismatchError, StaleCacheError) as exc:
        print(f"configuration mismatch: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, StreamError, ContractError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

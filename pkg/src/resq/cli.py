"""Command-line interface.

Subcommands: ``toy``, ``calibrate``, ``quantize``, ``eval``, ``compare``,
``report``. Exit codes: 0 ok, 2 usage or format error, 3 shape mismatch,
4 missing calibration, 5 incomparable archives.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import warnings

import numpy as np

from . import store
from .archive import Archive, ArchiveFormatError, read_archive, write_archive
from .calib import collect, derive, empty_bundle
from .model import QuantMode, fold_norms, forward, generate, init_toy_model, perplexity
from .mpgemm import op_count
from .pipeline import build
from .projection import IDENTITY, KINDS, OUTLIER, RESQ, ROTATION, build_baseline_basis, mixed_fake_quant, theorem1_bound
from .quant import PER_TENSOR, QuantConfig, quant_snr

EXIT_OK, EXIT_USAGE, EXIT_SHAPE, EXIT_NO_CALIB, EXIT_INCOMPARABLE = 0, 2, 3, 4, 5
REPORT_SCHEMA = 1

BASIS_FLAGS = {"resq": RESQ, "identity": IDENTITY, "rotation": ROTATION, "outlier": OUTLIER, "pca": "pca-only"}
SNR_BASES = ("identity", "rotation", "outlier", "resq")


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# -- token streams ---------------------------------------------------------------


def read_streams(path) -> np.ndarray:
    """One sequence per line, whitespace-separated non-negative ints; equal lengths."""
    try:
        with open(path, encoding="utf-8") as f:
            rows = [line.split() for line in f if line.strip()]
        seqs = [[int(t) for t in r] for r in rows]
    except (OSError, UnicodeDecodeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"cannot read token stream {path}: {exc}") from exc
    if not seqs:
        raise CliError(EXIT_USAGE, f"token stream {path} is empty")
    if len({len(s) for s in seqs}) != 1:
        raise CliError(EXIT_USAGE, f"token stream {path}: sequences have different lengths")
    arr = np.asarray(seqs, dtype=np.int64)
    if arr.min() < 0:
        raise CliError(EXIT_USAGE, f"token stream {path}: negative token id")
    return arr


def write_streams(path, tokens: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in np.asarray(tokens):
            f.write(" ".join(str(int(t)) for t in row) + "\n")


def _file_digest(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


def _load(path) -> Archive:
    try:
        return read_archive(path)
    except OSError as exc:
        raise CliError(EXIT_USAGE, f"cannot read archive {path}: {exc}") from exc
    except ArchiveFormatError as exc:
        raise CliError(EXIT_USAGE, f"{path}: {exc}") from exc


def _check_vocab(tokens, arc: Archive, path):
    vocab = store.get_config(arc).vocab
    if tokens.max() >= vocab:
        raise CliError(EXIT_USAGE, f"token stream {path}: token id {int(tokens.max())} >= vocab {vocab}")


# -- commands ------------------------------------------------------------------


def cmd_toy(args) -> int:
    w = init_toy_model(seed=args.seed)
    arc = Archive()
    store.put_model(arc, w)
    arc.meta["stage"] = "float"
    arc.meta["toy_seed"] = args.seed
    write_archive(args.out, arc)
    if args.calib_stream:
        write_streams(args.calib_stream, generate(w, args.n_calib, args.seq_len, seed=args.seed + 1))
    if args.eval_stream:
        write_streams(args.eval_stream, generate(w, args.n_eval, args.seq_len, seed=args.seed + 2))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    arc = _load(args.model)
    model = store.get_model(arc)
    tokens = read_streams(args.streams)
    _check_vocab(tokens, arc, args.streams)
    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        bundle = collect(model, tokens, n_samples=args.samples, n_hessian=args.hessian_samples, seed=args.seed)
        proj = derive(bundle, model.config.n_layers, rank_frac=args.rank_frac, seed=args.seed, kind=RESQ)
    for w in caught:
        msg = str(w.message)
        if msg not in notes:
            notes.append(msg)
            print(f"warning: {msg}", file=sys.stderr)
    out = Archive({k: v for k, v in arc.tensors.items() if k.startswith("model.")}, dict(arc.meta))
    for key in ("quant", "qproj"):
        out.meta.pop(key, None)
    store.put_bundle(out, bundle)
    store.put_proj(out, proj)
    out.meta["calibration"].update(
        {"rank_frac": args.rank_frac, "stream_digest": _file_digest(args.streams), "warnings": notes}
    )
    out.meta["stage"] = "calibrated"
    write_archive(args.out, out)
    return EXIT_OK


def cmd_quantize(args) -> int:
    arc = _load(args.archive)
    model = store.get_model(arc)
    kind = BASIS_FLAGS[args.basis]
    mode = QuantMode(args.wbits, args.abits, args.kvbits)
    calibrated = "calibration" in arc.meta
    floaty = args.wbits == args.abits == args.kvbits == 16
    use_gptq = not args.no_gptq and args.wbits != 16
    if not calibrated and (kind not in (IDENTITY, ROTATION) or use_gptq) and not floaty:
        need = "GPTQ Hessians" if kind in (IDENTITY, ROTATION) else f"the {args.basis} basis"
        raise CliError(EXIT_NO_CALIB, f"{need} need a calibrated archive; run `calibrate` first")

    bundle = store.get_bundle(arc) if calibrated else None
    seed = arc.meta["calibration"]["seed"] if calibrated else 0
    rank_frac = arc.meta["calibration"]["rank_frac"] if calibrated else 0.125
    drop = tuple(s for s in (args.drop or "").split(",") if s)
    if kind == RESQ and calibrated:
        proj = store.get_proj(arc)
    elif calibrated:
        proj = derive(bundle, model.config.n_layers, rank_frac=rank_frac, seed=seed, kind=kind)
    else:
        proj = derive(empty_bundle(model.config), model.config.n_layers, rank_frac=rank_frac, seed=seed, kind=kind)
    qm = build(model, bundle, mode, kind=kind, use_gptq=use_gptq, drop=drop, proj=proj)

    out = Archive({k: v for k, v in arc.tensors.items() if not k.startswith(("q.", "qproj."))}, dict(arc.meta))
    store.put_quantized(
        out, qm.weights, qm.proj, mode, {"basis": args.basis, "gptq": use_gptq, "drop": list(drop), "seed": seed}
    )
    out.meta["stage"] = "quantized"
    write_archive(args.out, out)
    return EXIT_OK


def _quant_config(arc: Archive) -> dict:
    c = arc.meta.get("config", {})
    q = arc.meta.get("quant")
    cal = arc.meta.get("calibration", {})
    echo = {
        "model_digest": arc.meta.get("model_digest"),
        "d_h": c.get("d_h"),
        "n_layers": c.get("n_layers"),
        "stage": arc.meta.get("stage"),
        "rank_frac": cal.get("rank_frac"),
        "calib_seed": cal.get("seed"),
    }
    if q:
        echo.update(
            {
                "basis": q["basis"],
                "wbits": q["mode"]["wbits"],
                "abits": q["mode"]["abits"],
                "kvbits": q["mode"]["kvbits"],
                "gptq": q["gptq"],
                "drop": ",".join(q["drop"]),
            }
        )
    return echo


def _experiment_id(arc: Archive, stream_path) -> str:
    h = hashlib.sha256(json.dumps(arc.meta, sort_keys=True).encode())
    h.update(_file_digest(stream_path).encode())
    return h.hexdigest()[:12]


def _ppl(arc: Archive, tokens) -> float:
    if "quant" in arc.meta:
        w, proj, mode = store.get_quantized(arc)
        floaty = mode.wbits == mode.abits == mode.kvbits == 16
        return perplexity(tokens, w, proj, None if floaty else mode)
    return perplexity(tokens, store.get_model(arc))


def _capture_sites(arc: Archive, tokens) -> dict:
    """Float-model activations at every projection site (norm-folded model)."""
    model = fold_norms(store.get_model(arc))
    c = model.config
    acts = {"U_A": []}
    for i in range(c.n_layers):
        acts[f"layer.{i}.U_B"] = []
        acts[f"layer.{i}.U_C"] = []

    def cap(site, layer, x):
        if site in ("attn_in", "ffn_in"):
            acts["U_A"].append(x.reshape(-1, x.shape[-1]))
        elif site == "value":
            acts[f"layer.{layer}.U_B"].append(x.reshape(-1, x.shape[-1]))
        elif site == "key":
            acts[f"layer.{layer}.U_C"].append(x.reshape(-1, x.shape[-1]))

    forward(tokens, model, capture=cap)
    return {k: np.concatenate(v).astype(np.float64) for k, v in acts.items()}


def _bits(arc: Archive) -> tuple[int, int]:
    q = arc.meta.get("quant")
    low = q["mode"]["abits"] if q else 4
    high = q["mode"].get("high_bits", 8) if q else 8
    if low == 16:
        low = 4
    return low, max(high, low + 1)


def snr_rows(arc: Archive, tokens) -> list[dict]:
    """Activation SNR at the shared block-boundary site for four bases."""
    if "calibration" not in arc.meta:
        raise store.MissingCalibration("SNR comparison needs calibration statistics")
    bundle = store.get_bundle(arc)
    stats = bundle.stats["U_A"]
    seed = arc.meta["calibration"]["seed"]
    r = store.get_proj(arc).u_a.rank_high
    x = _capture_sites(arc, tokens)["U_A"]
    lo, hi = _bits(arc)
    rows = []
    for name in SNR_BASES:
        kind = BASIS_FLAGS[name]
        b = store.get_proj(arc).u_a if kind == RESQ else build_baseline_basis(kind, stats, stats.dim, r, seed=seed)
        xu = x @ b.u
        rows.append({"basis": name, "rank": r, "bits_low": lo, "bits_high": hi, "snr_db": quant_snr(xu, mixed_fake_quant(x, b, lo, hi))})
    return rows


def bound_rows(arc: Archive, tokens) -> list[dict]:
    """Measured projected-domain error and its bound at every mixed site."""
    prefix = "qproj" if "quant" in arc.meta else "proj"
    proj = store.get_proj(arc, prefix)
    acts = _capture_sites(arc, tokens)
    bases = dict(proj.bases())
    lo, hi = _bits(arc)
    rows = []
    for site, x in acts.items():
        b = bases[site]
        xu = x @ b.u
        cfg = QuantConfig(lo, symmetric=True, granularity=PER_TENSOR)
        err = float(np.linalg.norm(xu - mixed_fake_quant(x, b, lo, hi, cfg)))
        try:
            bound = theorem1_bound(x, b, lo, hi)
        except ValueError:
            bound = float("nan")
        rows.append(
            {
                "site": site,
                "rank": b.rank_high,
                "measured": err,
                "bound": bound if math.isfinite(bound) else None,
                "within_bound": bool(math.isfinite(bound) and err <= bound),
            }
        )
    return rows


def _emit(rows: list[dict], fmt: str, record: dict, out=None) -> None:
    out = out or sys.stdout
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        out.write(buf.getvalue())
    else:
        out.write(json.dumps(record, indent=2) + "\n")


def _check_finite(obj, path="record"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"non-finite value at {path}")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{path}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")


def cmd_eval(args) -> int:
    arc = _load(args.archive)
    tokens = read_streams(args.stream)
    _check_vocab(tokens, arc, args.stream)
    record = {
        "schema_version": REPORT_SCHEMA,
        "experiment": _experiment_id(arc, args.stream),
        "metric": args.metric,
        "config": _quant_config(arc),
    }
    if args.metric == "ppl":
        rows = [{"perplexity": _ppl(arc, tokens)}]
        record["perplexity"] = rows[0]["perplexity"]
    elif args.metric == "snr":
        rows = snr_rows(arc, tokens)
        record["snr"] = rows
    else:
        rows = bound_rows(arc, tokens)
        record["bound"] = rows
    _check_finite(record)
    _emit(rows, args.emit, record)
    return EXIT_OK


COMPARE_KEYS = ("model_digest", "d_h", "n_layers")


def cmd_compare(args) -> int:
    if len(args.archives) < 2:
        raise CliError(EXIT_USAGE, "compare needs at least two archives")
    arcs = [_load(p) for p in args.archives]
    echoes = [_quant_config(a) for a in arcs]
    differing = sorted({k for k in COMPARE_KEYS for e in echoes if e.get(k) != echoes[0].get(k)})
    if differing:
        raise CliError(EXIT_INCOMPARABLE, "archives are not comparable; differing keys: " + ", ".join(differing))
    tokens = read_streams(args.stream)
    _check_vocab(tokens, arcs[0], args.stream)
    rows = []
    base = None
    for path, arc, echo in zip(args.archives, arcs, echoes):
        ppl = _ppl(arc, tokens)
        base = ppl if base is None else base
        rank = store.get_proj(arc, "qproj" if "quant" in arc.meta else "proj").u_a.rank_high if (
            "quant" in arc.meta or "proj" in arc.meta
        ) else 0
        rows.append(
            {
                "archive": path,
                "basis": echo.get("basis", "float"),
                "wbits": echo.get("wbits", 16),
                "abits": echo.get("abits", 16),
                "kvbits": echo.get("kvbits", 16),
                "gptq": echo.get("gptq", False),
                "drop": echo.get("drop", ""),
                "rank": rank,
                "ppl": ppl,
                "delta_ppl": ppl - base,
            }
        )
    if args.rank_sweep:
        rows = [{"r": row["rank"], "ppl": row["ppl"]} for row in sorted(rows, key=lambda r: r["rank"])]
    record = {"schema_version": REPORT_SCHEMA, "rows": rows}
    _check_finite(record)
    _emit(rows, args.emit, record)
    return EXIT_OK


def cmd_report(args) -> int:
    arc = _load(args.archive)
    tokens = read_streams(args.stream)
    _check_vocab(tokens, arc, args.stream)
    c = store.get_config(arc)
    record = {
        "schema_version": REPORT_SCHEMA,
        "experiment": _experiment_id(arc, args.stream),
        "config": _quant_config(arc),
        "perplexity": {"float": perplexity(tokens, store.get_model(arc))},
    }
    if "quant" in arc.meta:
        record["perplexity"]["quantized"] = _ppl(arc, tokens)
    if "calibration" in arc.meta:
        record["snr_db"] = {r["basis"]: r["snr_db"] for r in snr_rows(arc, tokens)}
        bounds = bound_rows(arc, tokens)
        record["frobenius_error"] = {r["site"]: r["measured"] for r in bounds}
        record["bound"] = {r["site"]: r["bound"] for r in bounds if r["bound"] is not None}
        r = store.get_proj(arc).u_a.rank_high
    else:
        r = 0
    n_tok = int(tokens.size)
    lo, hi = _bits(arc)
    record["op_counts"] = {
        "qkv_proj": op_count((n_tok, c.d_h, (c.n_heads + 2 * c.n_kv_heads) * c.d_head), r, lo, hi).as_dict(),
        "down_proj": op_count((n_tok, c.d_ffn, c.d_h), 0, lo, hi, projection="hadamard").as_dict(),
    }
    _check_finite(record)
    text = json.dumps(record, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _bits_arg(v: str) -> int:
    b = int(v)
    if b != 16 and not 2 <= b <= 8:
        raise argparse.ArgumentTypeError("bits must be 2..8 or 16")
    return b


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resq", description="Mixed-precision post-training quantization toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("toy", help="write a random toy decoder archive and sampled token streams")
    t.add_argument("out")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--calib-stream")
    t.add_argument("--eval-stream")
    t.add_argument("--n-calib", type=int, default=64)
    t.add_argument("--n-eval", type=int, default=16)
    t.add_argument("--seq-len", type=int, default=128)
    t.set_defaults(func=cmd_toy)

    c = sub.add_parser("calibrate", help="collect statistics and derive projections")
    c.add_argument("model")
    c.add_argument("streams")
    c.add_argument("out")
    c.add_argument("--samples", type=int, default=512)
    c.add_argument("--hessian-samples", type=int, default=128)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--rank-frac", type=float, default=0.125)
    c.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("quantize", help="fuse projections and quantize the model")
    q.add_argument("archive")
    q.add_argument("out")
    q.add_argument("--wbits", type=_bits_arg, default=4)
    q.add_argument("--abits", type=_bits_arg, default=4)
    q.add_argument("--kvbits", type=_bits_arg, default=4)
    q.add_argument("--basis", choices=sorted(BASIS_FLAGS), default="resq")
    q.add_argument("--no-gptq", action="store_true")
    q.add_argument("--drop", help="comma list of sites replaced by identity: u_a,u_b,u_c,u_d")
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("eval", help="evaluate one archive")
    e.add_argument("archive")
    e.add_argument("stream")
    e.add_argument("--metric", choices=("ppl", "snr", "bound"), default="ppl")
    e.add_argument("--emit", choices=("json", "csv"), default="json")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("compare", help="tabulate perplexity across archives")
    m.add_argument("archives", nargs="+")
    m.add_argument("--stream", required=True)
    m.add_argument("--emit", choices=("json", "csv"), default="csv")
    m.add_argument("--rank-sweep", action="store_true", help="emit (r, ppl) pairs sorted by rank")
    m.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="full JSON report for one archive")
    r.add_argument("archive")
    r.add_argument("stream")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "drop", None):
        bad = [s for s in args.drop.split(",") if s and s not in ("u_a", "u_b", "u_c", "u_d")]
        if bad:
            parser.error(f"unknown --drop site(s): {', '.join(bad)}")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except store.ShapeMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except store.MissingCalibration as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CALIB
    except (ArchiveFormatError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

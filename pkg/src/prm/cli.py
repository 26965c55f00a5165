"""Command line: ``prm synth``, ``prm pipeline``, ``prm serve``.

Every option can also come from a flat ``key = value`` file given with
``--config``; explicit flags win.  Each pipeline stage writes its artifact and
a ``<stage>.provenance.json`` record holding input/output hashes and the fully
resolved configuration.  Exit codes: 0 success, 1 runtime error, 2
configuration error.  ``PRM_LOG`` sets verbosity (error, info, debug).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .baseline import PointwiseRanker, build_initial_lists
from .data.letor import convert_letor, read_graded
from .data.schema import (DatasetManifest, ManifestError, ParseError, build_manifest, parse_records,
                          save_manifest, write_records)
from .data.synthetic import GroundTruth, SynthSpec, generate_synthetic, relabel
from .evaluation import IdentityReranker, evaluate_run, export_attention
from .model import ConfigurationError
from .pretrain import PersonalizationPretrainer, read_pv_table, write_pv_table
from .reranker import PRMReranker

log = logging.getLogger("prm")

STAGES = ("convert-letor", "train-baseline", "build-lists", "pretrain", "extract-pv", "train-prm",
          "eval", "export-attention")

SYNTH_DEFAULTS = {
    "requests": 1000, "pretrain_records": 5000, "users": 200, "items": 600, "categories": 6,
    "dense": 4, "candidates": 40, "n_max": 20, "history_len": 5, "interaction_scale": 8.0,
    "personalization_scale": 0.5, "position_scale": 1.0, "affinity_pairs": 3, "click_bias": -1.5,
}

PIPELINE_DEFAULTS = {
    "n_max": 30, "letor_input": "", "threshold": 1.5, "eta": 0.2, "d_feature": 0,
    "baseline_steps": 1500, "baseline_lr": 3e-3, "baseline_batch": 256,
    "pretrain_steps": 600, "pretrain_lr": 3e-3, "pretrain_batch": 512, "d_emb": 16,
    "pretrain_hidden": "64,32",
    "d_model": 32, "num_blocks": 2, "num_heads": 2, "ffn_inner": 0, "dropout": 0.1, "use_pe": True,
    "use_pv": False, "use_residual": True, "use_dropout": True, "head_style": "paper_literal",
    "batch_size": 64, "max_steps": 800, "warmup_steps": 200, "lr_scale": 2.0, "normalize_loss": False,
    "test_fraction": 0.2, "system": "prm", "grouping": "category", "block": -1, "head": "mean",
}

SERVE_DEFAULTS = {"checkpoint": "", "pv": "", "pretrain_model": "", "host": "127.0.0.1", "port": 7070}


class DependencyError(RuntimeError):
    pass


class UsageError(ValueError):
    pass


# -- configuration -----------------------------------------------------------

def read_flat_config(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        s = str(value).lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise UsageError(f"expected {type(default).__name__}, got {value!r}") from None


def resolve(args, defaults: dict) -> dict:
    """Flags override the config file, which overrides built-in defaults."""
    file_cfg = read_flat_config(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - set(defaults) - {"seed", "out", "stages", "data"}
    if unknown:
        raise UsageError(f"unknown configuration keys: {sorted(unknown)}")
    cfg = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = _coerce(flag, default)
        elif key in file_cfg:
            cfg[key] = _coerce(file_cfg[key], default)
        else:
            cfg[key] = default
    cfg["seed"] = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    return cfg


def _add_options(p: argparse.ArgumentParser, defaults: dict) -> None:
    for key, default in defaults.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                       help=f"default: {default}")


# -- helpers -----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(out: Path, stage: str, inputs, outputs, cfg: dict) -> None:
    rec = {
        "stage": stage,
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": {Path(p).name: sha256_file(p) for p in inputs if Path(p).exists()},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs if Path(p).exists()},
    }
    (out / f"{stage}.provenance.json").write_text(json.dumps(rec, sort_keys=True, indent=2) + "\n")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path.name}; run the '{stage}' stage first")
    return path


def _split(records, test_fraction):
    n_test = int(round(len(records) * test_fraction))
    cut = len(records) - n_test
    return records[:cut], records[cut:]


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# -- synth -----------------------------------------------------------------

def synth_spec_from(cfg: dict) -> SynthSpec:
    return SynthSpec(
        n_requests=cfg["requests"], n_pretrain=cfg["pretrain_records"], n_users=cfg["users"],
        n_items=cfg["items"], n_categories=cfg["categories"], n_dense=cfg["dense"],
        n_candidates=cfg["candidates"], n_max=cfg["n_max"], history_len=cfg["history_len"],
        interaction_scale=cfg["interaction_scale"], personalization_scale=cfg["personalization_scale"],
        position_scale=cfg["position_scale"], n_affinity_pairs=cfg["affinity_pairs"],
        click_bias=cfg["click_bias"],
    )


def cmd_synth(cfg: dict, out: Path) -> None:
    spec = synth_spec_from(cfg)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data = generate_synthetic(spec, cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    write_records(data.rerank, out / "rerank.jsonl", data.manifest)
    pre_manifest = DatasetManifest(d_feature=spec.d_feature, n_max=spec.n_max, vocab=data.manifest.vocab,
                                   counts={"records": len(data.pretrain), "items": len(data.pretrain)})
    write_records(data.pretrain, out / "pretrain.jsonl", pre_manifest)
    cand_manifest = DatasetManifest(d_feature=spec.d_feature, n_max=max(spec.n_candidates, 1),
                                    vocab=data.manifest.vocab,
                                    counts={"records": len(data.candidates),
                                            "items": sum(len(r.items) for r in data.candidates)})
    write_records(data.candidates, out / "candidates.jsonl", cand_manifest)
    _json_dump(out / "truth.json", data.truth.to_dict())
    outputs = [out / n for n in ("rerank.jsonl", "pretrain.jsonl", "candidates.jsonl", "truth.json")]
    write_provenance(out, "synth", [], outputs, cfg)
    log.info("wrote %d requests, %d pretrain records to %s", len(data.rerank), len(data.pretrain), out)


# -- pipeline stages -------------------------------------------------------

def _load_rerank(path: Path, stage: str):
    records, manifest = parse_records(_require(path, stage), "rerank")
    return records, manifest


def _prm_from_cfg(cfg: dict) -> PRMReranker:
    return PRMReranker(
        d_model=cfg["d_model"], num_blocks=cfg["num_blocks"], num_heads=cfg["num_heads"],
        ffn_inner=cfg["ffn_inner"] or None, dropout=cfg["dropout"], use_pe=cfg["use_pe"],
        use_pv=cfg["use_pv"], use_residual=cfg["use_residual"], use_dropout=cfg["use_dropout"],
        head_style=cfg["head_style"], n_max=cfg["n_max"], normalize_loss=cfg["normalize_loss"],
        batch_size=cfg["batch_size"], max_steps=cfg["max_steps"], warmup_steps=cfg["warmup_steps"],
        lr_scale=cfg["lr_scale"], seed=cfg["seed"],
    )


def stage_convert_letor(cfg, data: Path, out: Path):
    if not cfg["letor_input"]:
        raise UsageError("convert-letor needs --letor-input")
    src = _require(Path(cfg["letor_input"]), "convert-letor input")
    lists = read_graded(src, cfg["d_feature"] or None)
    records = convert_letor(lists, cfg["threshold"], cfg["eta"], cfg["seed"], n_max=cfg["n_max"])
    dst = out / "rerank.jsonl"
    write_records(records, dst, build_manifest(records, n_max=cfg["n_max"]))
    return [src], [dst]


def stage_train_baseline(cfg, data: Path, out: Path):
    src = _require(data / "pretrain.jsonl", "synth")
    records, _ = parse_records(src, "pretrain")
    X = np.array([r.item.features for r in records])
    y = np.array([r.item.label for r in records])
    ranker = PointwiseRanker(max_steps=cfg["baseline_steps"], learning_rate=cfg["baseline_lr"],
                             batch_size=cfg["baseline_batch"], seed=cfg["seed"]).fit(X, y)
    dst = out / "baseline.json"
    _json_dump(dst, {"estimator": ranker.get_params(), "n_features_in": ranker.n_features_in_,
                     "tensors": {k: v.tolist() for k, v in ranker.params_.items()}})
    return [src], [dst]


def _load_baseline(path: Path) -> PointwiseRanker:
    doc = json.loads(path.read_text())
    est = PointwiseRanker(**{k: (tuple(v) if k == "hidden" else v) for k, v in doc["estimator"].items()})
    est.n_features_in_ = doc["n_features_in"]
    est.params_ = {k: np.asarray(v, dtype=np.float64) for k, v in doc["tensors"].items()}
    return est


def stage_build_lists(cfg, data: Path, out: Path):
    cand_path = _require(data / "candidates.jsonl", "synth")
    base_path = _require(out / "baseline.json", "train-baseline")
    candidates, _ = parse_records(cand_path, "rerank")
    lists = build_initial_lists(candidates, _load_baseline(base_path), cfg["n_max"])
    inputs = [cand_path, base_path]
    truth_path = data / "truth.json"
    if truth_path.exists():
        lists = relabel(lists, GroundTruth.from_dict(json.loads(truth_path.read_text())), cfg["seed"])
        inputs.append(truth_path)
    dst = out / "rerank.jsonl"
    write_records(lists, dst, build_manifest(lists, n_max=cfg["n_max"]))
    return inputs, [dst]


def _rerank_path(data: Path, out: Path) -> Path:
    p = out / "rerank.jsonl"
    return p if p.exists() else data / "rerank.jsonl"


def stage_pretrain(cfg, data: Path, out: Path):
    src = _require(data / "pretrain.jsonl", "synth")
    records, _ = parse_records(src, "pretrain")
    hidden = tuple(int(h) for h in str(cfg["pretrain_hidden"]).split(","))
    pre = PersonalizationPretrainer(d_emb=cfg["d_emb"], hidden=hidden, learning_rate=cfg["pretrain_lr"],
                                    batch_size=cfg["pretrain_batch"], max_steps=cfg["pretrain_steps"],
                                    seed=cfg["seed"]).fit(records)
    dst = out / "pretrain_model.json"
    dst.write_text(json.dumps(pre.to_dict(), sort_keys=True))
    return [src], [dst]


def stage_extract_pv(cfg, data: Path, out: Path):
    model_path = _require(out / "pretrain_model.json", "pretrain")
    rr = _rerank_path(data, out)
    records, _ = _load_rerank(rr, "build-lists")
    pre = PersonalizationPretrainer.from_dict(json.loads(model_path.read_text()))
    dst = out / "pv.jsonl"
    write_pv_table(pre.transform(records), dst)
    return [model_path, rr], [dst]


def _pv_if_needed(cfg, out: Path):
    if not cfg["use_pv"]:
        return None, []
    p = _require(out / "pv.jsonl", "extract-pv")
    return read_pv_table(p), [p]


def stage_train_prm(cfg, data: Path, out: Path):
    rr = _rerank_path(data, out)
    records, manifest = _load_rerank(rr, "build-lists")
    train, _ = _split(records, cfg["test_fraction"])
    pv, pv_inputs = _pv_if_needed(cfg, out)
    model = _prm_from_cfg({**cfg, "n_max": max(cfg["n_max"], manifest.n_max)})
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as fh:
        model.fit(train, pv_table=pv, log_sink=lambda line: fh.write(line + "\n"))
    dst = out / "prm_checkpoint.json"
    model.save(dst)
    return [rr] + pv_inputs, [dst, log_path]


def stage_eval(cfg, data: Path, out: Path):
    rr = _rerank_path(data, out)
    records, manifest = _load_rerank(rr, "build-lists")
    _, test = _split(records, cfg["test_fraction"])
    inputs = [rr]
    pv = None
    if cfg["system"] == "initial":
        system = IdentityReranker()
    else:
        ck = _require(out / "prm_checkpoint.json", "train-prm")
        system = PRMReranker.load(ck)
        inputs.append(ck)
        if system.config_.use_pv:
            pv, extra = _pv_if_needed({"use_pv": True}, out)
            inputs += extra
    n_max = getattr(getattr(system, "config_", None), "n_max", manifest.n_max)
    metrics, dump = evaluate_run(system, test, pv, ks=(5, 10, n_max),
                                 manifest=manifest if cfg["system"] != "initial" else None)
    dst = out / f"metrics_{cfg['system']}.json"
    _json_dump(dst, metrics.to_report())
    scores_path = out / f"scores_{cfg['system']}.jsonl"
    with open(scores_path, "w") as fh:
        for row in dump:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return inputs, [dst, scores_path]


def stage_export_attention(cfg, data: Path, out: Path):
    rr = _rerank_path(data, out)
    ck = _require(out / "prm_checkpoint.json", "train-prm")
    records, manifest = _load_rerank(rr, "build-lists")
    _, test = _split(records, cfg["test_fraction"])
    model = PRMReranker.load(ck)
    pv, extra = _pv_if_needed({"use_pv": model.config_.use_pv}, out)
    grouping = cfg["grouping"]
    n_groups = {"category": manifest.vocab.get("category"), "price_level": manifest.vocab.get("price_level"),
                "position": model.config_.n_max}.get(grouping)
    head = cfg["head"] if cfg["head"] == "mean" else int(cfg["head"])
    agg = export_attention(model, test, grouping, block=cfg["block"], head=head, pv_table=pv,
                           n_groups=n_groups)
    dst = out / f"attention_{grouping}.csv"
    dst.write_text(agg.to_csv())
    return [rr, ck] + extra, [dst]


STAGE_FUNCS = {
    "convert-letor": stage_convert_letor, "train-baseline": stage_train_baseline,
    "build-lists": stage_build_lists, "pretrain": stage_pretrain, "extract-pv": stage_extract_pv,
    "train-prm": stage_train_prm, "eval": stage_eval, "export-attention": stage_export_attention,
}


def cmd_pipeline(cfg: dict, stages, data: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for stage in stages:
        if stage not in STAGE_FUNCS:
            raise UsageError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    for stage in stages:
        log.info("stage %s", stage)
        inputs, outputs = STAGE_FUNCS[stage](cfg, data, out)
        write_provenance(out, stage, inputs, outputs, {**cfg, "stages": list(stages), "data": str(data)})


def cmd_serve(cfg: dict, on_ready=None) -> None:
    """Serve until interrupted; ``on_ready(server)`` runs once the socket is bound."""
    from .serve import RerankService, make_server

    if not cfg["checkpoint"]:
        raise UsageError("serve needs --checkpoint")
    model = PRMReranker.load(_require(Path(cfg["checkpoint"]), "train-prm"))
    pv = read_pv_table(cfg["pv"]) if cfg["pv"] else None
    pre = None
    if cfg["pretrain_model"]:
        pre = PersonalizationPretrainer.from_dict(json.loads(Path(cfg["pretrain_model"]).read_text()))
    server = make_server(RerankService(model, pv, pre), cfg["host"], cfg["port"])
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port}", flush=True)
    if on_ready is not None:
        on_ready(server)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prm", description="Personalized re-ranking toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    _add_options(p, SYNTH_DEFAULTS)

    p = sub.add_parser("pipeline", help="run pipeline stages")
    common(p)
    p.add_argument("--stages", required=True, help="comma-separated subset of: " + ", ".join(STAGES))
    p.add_argument("--data", default=None, help="directory with synth output (default: --out)")
    p.add_argument("--out", required=True)
    _add_options(p, PIPELINE_DEFAULTS)

    p = sub.add_parser("serve", help="serve re-ranking requests over TCP")
    common(p)
    _add_options(p, SERVE_DEFAULTS)
    return parser


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("PRM_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            cfg = resolve(args, SYNTH_DEFAULTS)
            log.info("resolved configuration: %s", json.dumps(cfg, sort_keys=True))
            cmd_synth(cfg, Path(args.out))
        elif args.command == "pipeline":
            cfg = resolve(args, PIPELINE_DEFAULTS)
            log.info("resolved configuration: %s", json.dumps(cfg, sort_keys=True))
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            cmd_pipeline(cfg, stages, Path(args.data or args.out), Path(args.out))
        else:
            cfg = resolve(args, SERVE_DEFAULTS)
            log.info("resolved configuration: %s", json.dumps(cfg, sort_keys=True))
            cmd_serve(cfg)
    except (UsageError, DependencyError, ConfigurationError, ManifestError, ParseError) as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.error("%s: %s", type(exc).__name__, exc)
        if os.environ.get("PRM_LOG", "").lower() == "debug":
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``mdfsc synth | train-ae | fit-dict | score | eval``.

Configuration comes from an optional TOML file, then ``MDFSC_SEED``, then
``--section.key=value`` flags (highest precedence).  Every command appends the
fully resolved configuration to the run log in TOML syntax, so a logged block
can be fed back with ``--config`` to reproduce the run.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import datetime
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import autoencoder as ae
from . import features, metrics, pipeline, scoring, sparse
from .errors import (ConfigError, ContractError, FitError, IngestionError, LoadError,
                     NumericError, UndefinedMetricError)

log = logging.getLogger("mdfsc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "seed": 42,
    "image_size": 512,
    "threads": 1,
    "synth": {
        "n_normal": 250, "n_anomalous": 50, "size": 128, "channels": 3,
        "anomaly_count": [1, 3], "anomaly_radius": [0.03, 0.06], "contrast": 0.25,
        "kinds": ["bright", "dark"], "texture_amplitude": 0.02, "n_vessels": [4, 7],
    },
    "split": {"train_fraction": 0.8},
    "ae": {
        "widths": list(ae.DESK_WIDTHS), "convs_per_stage": [2, 2, 3, 3, 3], "latent_dim": 256,
        "with_linear_head": True, "epochs": 50, "batch": 32, "lr": 1e-4, "crop": 64,
    },
    "features": {"patch": 16, "stride": 2, "budget_per_image": 500},
    "sparse": {"n_atoms": 50, "alpha": 1.0, "max_outer": 30, "tol": 1e-4},
    "scoring": {"k": 5, "scorer": "mdfsc", "count_normalized": False, "split": "test"},
    "paths": {
        "manifest": "data/manifest.tsv", "checkpoint": "out/model.ckpt",
        "dictionary": "out/dict.bin", "reports": "out/reports.jsonl",
        "metrics": "out/metrics.json", "roc_csv": "", "run_log": "out/run.log",
    },
}

# defaults not taken from the method description
ARTIFACT_DEFAULTS = {
    "seed", "threads", "synth", "split.train_fraction", "ae.widths", "ae.convs_per_stage",
    "ae.latent_dim", "ae.epochs", "ae.batch", "features.budget_per_image", "sparse.max_outer",
    "sparse.tol", "scoring.count_normalized", "scoring.split", "paths",
}


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, update: dict, where: str = "") -> None:
    for key, value in update.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{name!r} must be a table")
            _merge(base[key], value, name + ".")
        else:
            if isinstance(value, dict):
                raise ConfigError(f"{name!r} is not a table")
            base[key] = _coerce(base[key], value, name)


def _coerce(default, value, name):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name!r} must be true or false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, type(value)):
        return value
    raise ConfigError(f"{name!r} expects {type(default).__name__}, got {value!r}")


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text  # bare string


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like --section.key=value")
    key, text = item.split("=", 1)
    parts = key.split(".")
    out = node = {}
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = _parse_value(text)
    return out


def resolve_config(path=None, overrides=(), env=None) -> dict:
    """Defaults, then the TOML file, then ``MDFSC_SEED``, then overrides."""
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "rb") as fh:
                _merge(cfg, tomllib.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if env.get("MDFSC_SEED"):
        try:
            cfg["seed"] = int(env["MDFSC_SEED"])
        except ValueError:
            raise ConfigError(f"MDFSC_SEED must be an integer, got {env['MDFSC_SEED']!r}") from None
    for item in overrides:
        _merge(cfg, parse_override(item))
    _validate(cfg)
    return cfg


def _validate(cfg):
    if not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    f = cfg["features"]
    if f["patch"] % 8 or f["patch"] < 8:
        raise ConfigError(f"features.patch must be a positive multiple of 8, got {f['patch']}")
    if f["stride"] < 1 or f["budget_per_image"] < 1:
        raise ConfigError("features.stride and features.budget_per_image must be >= 1")
    if cfg["sparse"]["n_atoms"] < 1 or cfg["sparse"]["alpha"] < 0:
        raise ConfigError("sparse.n_atoms must be >= 1 and sparse.alpha >= 0")
    if cfg["scoring"]["k"] < 1:
        raise ConfigError("scoring.k must be >= 1")
    if cfg["scoring"]["scorer"] not in ("mdfsc", "recon"):
        raise ConfigError("scoring.scorer must be 'mdfsc' or 'recon'")
    if cfg["scoring"]["split"] not in ("test", "all"):
        raise ConfigError("scoring.split must be 'test' or 'all'")
    if cfg["ae"]["epochs"] < 0 or cfg["ae"]["batch"] < 1 or cfg["ae"]["lr"] <= 0:
        raise ConfigError("ae.epochs >= 0, ae.batch >= 1 and ae.lr > 0 are required")
    if cfg["image_size"] < cfg["features"]["patch"]:
        raise ConfigError("image_size must be at least features.patch")


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(v)  # ints and strings share JSON syntax


def dump_toml(cfg: dict) -> str:
    lines = [f"{k} = {_toml_value(v)}" for k, v in cfg.items() if not isinstance(v, dict)]
    for k, v in cfg.items():
        if isinstance(v, dict):
            lines.append(f"\n[{k}]")
            lines += [f"{kk} = {_toml_value(vv)}" for kk, vv in v.items()]
    return "\n".join(lines) + "\n"


def _stream(seed: int, tag: str) -> np.random.Generator:
    """Independent generator per command stage, derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, *tag.encode()]))


def _run_log(cfg, command, result):
    path = Path(cfg["paths"]["run_log"])
    path.parent.mkdir(parents=True, exist_ok=True)
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(f"# ---- mdfsc {command} at {stamp}\n")
        fh.write("# artifact defaults (not from the method): " + ", ".join(sorted(ARTIFACT_DEFAULTS)) + "\n")
        fh.write(dump_toml(cfg))
        fh.write(f"# result: {json.dumps(result, sort_keys=True)}\n\n")


# --------------------------------------------------------------------------
# data access


def _entries(cfg):
    path = Path(cfg["paths"]["manifest"])
    if not path.exists():
        raise IngestionError(f"manifest {path} not found")
    return path.parent, pipeline.read_manifest(path)


def _load(root, entries, size):
    return [pipeline.load_and_resize(root / rel, size, label, pipeline.entry_id(rel))
            for rel, label in entries]


def _arch(cfg, channels) -> ae.ArchSpec:
    a = cfg["ae"]
    return ae.ArchSpec(tuple(a["widths"]), tuple(a["convs_per_stage"]), a["latent_dim"],
                       channels, a["with_linear_head"], a["crop"])


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg) -> dict:
    s = cfg["synth"]
    scfg = pipeline.SynthConfig(s["n_normal"], s["n_anomalous"], cfg["split"]["train_fraction"],
                                s["size"], s["channels"], s["anomaly_count"], s["anomaly_radius"],
                                s["contrast"], s["kinds"], s["texture_amplitude"], s["n_vessels"])
    manifest = Path(cfg["paths"]["manifest"])
    (manifest.parent / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for anomalous, n, stem in ((False, scfg.n_normal, "normal"), (True, scfg.n_anomalous, "anomalous")):
        for i in range(n):
            rec, _ = pipeline.synth_image(scfg, cfg["seed"], f"{stem}_{i:05d}", anomalous)
            rel = f"images/{rec.id}.png"
            pipeline.write_image(manifest.parent / rel, rec.pixels)
            entries.append((rel, rec.label))
    pipeline.write_manifest(manifest, entries)
    result = {"n_normal": scfg.n_normal, "n_anomalous": scfg.n_anomalous, "manifest": str(manifest)}
    print(f"wrote {len(entries)} images ({scfg.n_normal} normal, {scfg.n_anomalous} anomalous) "
          f"and {manifest}")
    return result


def _train_images(cfg):
    root, entries = _entries(cfg)
    train, _ = pipeline.split_entries(entries, cfg["split"]["train_fraction"])
    if not train:
        raise IngestionError("the manifest has no normal images for training")
    return _load(root, train, cfg["image_size"])


def cmd_train_ae(cfg) -> dict:
    images = _train_images(cfg)
    stats = pipeline.fit_norm_stats(images)
    normed = [pipeline.apply_norm(im, stats) for im in images]
    model = ae.build(_arch(cfg, images[0].channels), _stream(cfg["seed"], "ae.init"))
    model.norm_stats = stats
    a = cfg["ae"]
    report = ae.train(model, normed, a["epochs"], a["batch"], a["lr"], a["crop"],
                      _stream(cfg["seed"], "ae.train"))
    model.train_meta["seed"] = cfg["seed"]
    path = Path(cfg["paths"]["checkpoint"])
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = ae.save(model, path)
    print(f"checkpoint {path} digest {digest} final loss {report.final_loss}")
    return {"checkpoint": str(path), "digest": digest, "final_loss": report.final_loss,
            "steps": report.steps}


def _load_model(cfg):
    path = Path(cfg["paths"]["checkpoint"])
    if not path.exists():
        raise LoadError(f"checkpoint {path} not found; run train-ae first")
    return ae.load(path)


def cmd_fit_dict(cfg) -> dict:
    model = _load_model(cfg)
    if not model.arch.with_linear_head:
        log.warning("fitting a dictionary on a model without the linear head")
    images = [ae.prepare(model, im) for im in _train_images(cfg)]
    f, s = cfg["features"], cfg["sparse"]
    F = features.build_feature_matrix(model, images, f["budget_per_image"],
                                      _stream(cfg["seed"], "features"), f["patch"], f["stride"])
    D, report = sparse.dict_learn(F, s["n_atoms"], s["alpha"], s["max_outer"], s["tol"],
                                  _stream(cfg["seed"], "sparse"), threads=cfg["threads"])
    D.meta.update({"n_atoms": s["n_atoms"], "model_digest": model.digest, "patch": f["patch"],
                   "stride": f["stride"], "budget_per_image": f["budget_per_image"],
                   "m": F.m, "seed": cfg["seed"], "converged": report.converged})
    path = Path(cfg["paths"]["dictionary"])
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = sparse.save_dict(D, path)
    print(f"dictionary {path} ({D.d} x {D.n}, m={F.m}) digest {digest} "
          f"objective {report.objective_trace[-1]:.6g} after {report.n_outer} sweeps")
    return {"dictionary": str(path), "digest": digest, "d": D.d, "n": D.n, "m": F.m,
            "objective": report.objective_trace[-1], "n_outer": report.n_outer}


def cmd_score(cfg) -> dict:
    model = _load_model(cfg)
    sc = cfg["scoring"]
    D = None
    kwargs = {}
    if sc["scorer"] == "mdfsc":
        dpath = Path(cfg["paths"]["dictionary"])
        if not dpath.exists():
            raise LoadError(f"dictionary {dpath} not found; run fit-dict first")
        D = sparse.load_dict(dpath)
        want = D.meta.get("model_digest")
        if want and want != model.digest:
            raise ContractError(f"dictionary {D.digest} was fitted on model {want}, "
                                f"not on checkpoint {model.digest}")
        f = cfg["features"]
        kwargs = {"alpha": cfg["sparse"]["alpha"], "patch": f["patch"], "stride": f["stride"],
                  "count_normalized": sc["count_normalized"], "threads": cfg["threads"]}
    root, entries = _entries(cfg)
    if sc["split"] == "test":
        _, entries = pipeline.split_entries(entries, cfg["split"]["train_fraction"])
    images, reports = [], []
    for rel, label in entries:
        try:
            img = pipeline.load_and_resize(root / rel, cfg["image_size"], label, pipeline.entry_id(rel))
            images.append(ae.prepare(model, img))
        except IngestionError as exc:
            images.append(None)
            reports.append(scoring.ScoreError(pipeline.entry_id(rel), str(exc)))
    good = [im for im in images if im is not None]
    scored = iter(scoring.score_batch(model, D, good, sc["k"], sc["scorer"], **kwargs))
    errors = iter(reports)
    ordered = [next(scored) if im is not None else next(errors) for im in images]
    path = Path(cfg["paths"]["reports"])
    path.parent.mkdir(parents=True, exist_ok=True)
    scoring.write_reports(path, ordered)
    failed = [r for r in ordered if isinstance(r, scoring.ScoreError)]
    for r in failed:
        print(f"error scoring {r.id}: {r.message}", file=sys.stderr)
    print(f"scored {len(ordered) - len(failed)} images ({sc['scorer']}), {len(failed)} errors -> {path}")
    if failed:
        raise IngestionError(f"{len(failed)} image(s) could not be scored")
    return {"reports": str(path), "n": len(ordered), "errors": len(failed)}


def cmd_eval(cfg) -> dict:
    rows = scoring.read_reports(cfg["paths"]["reports"])
    _, entries = _entries(cfg)
    labels = {pipeline.entry_id(rel): lab for rel, lab in entries}
    rows = [r for r in rows if "error" not in r]
    missing = [r["id"] for r in rows if r["id"] not in labels]
    if missing:
        raise IngestionError(f"report ids missing from the manifest: {', '.join(missing)}")
    scores = [r["score"] for r in rows]
    y = [1 if labels[r["id"]] == "anomalous" else 0 for r in rows]
    if not rows:
        raise UndefinedMetricError("no reports to evaluate")
    result = metrics.evaluate(scores, y)
    out = Path(cfg["paths"]["metrics"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, sort_keys=True) + "\n", encoding="utf-8")
    if cfg["paths"]["roc_csv"]:
        metrics.write_roc_csv(cfg["paths"]["roc_csv"], scores, y)
    print(json.dumps(result, sort_keys=True))
    return result


COMMANDS = {"synth": cmd_synth, "train-ae": cmd_train_ae, "fit-dict": cmd_fit_dict,
            "score": cmd_score, "eval": cmd_eval}


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mdfsc", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="TOML configuration file")
    ap.add_argument("--threads", type=int, help="worker cap (1 = deterministic reference path)")
    ap.add_argument("--scorer", choices=("mdfsc", "recon"), help="shorthand for --scoring.scorer")
    ap.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    known = [a for a in argv if not (a.startswith("--") and "." in a.split("=", 1)[0])]
    overrides = [a[2:] for a in argv if a not in known]
    args = ap.parse_args(known)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        if args.scorer:
            overrides.append(f"scoring.scorer={args.scorer!s}")
        cfg = resolve_config(args.config, overrides)
        if args.print_config:
            print(dump_toml(cfg), end="")
            return EXIT_OK
        result = COMMANDS[args.command](cfg)
        _run_log(cfg, args.command, result)
        return EXIT_OK
    except (ConfigError, ContractError) as exc:
        print(f"mdfsc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"mdfsc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestionError, LoadError, FitError, UndefinedMetricError, OSError) as exc:
        print(f"mdfsc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

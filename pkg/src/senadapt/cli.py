"""Batch command-line pipeline: gen -> pretrain -> adapt -> eval.

Each subcommand reads a flat key=value config file, applies --seed/--out
overrides, writes its resolved config next to its outputs, and exits with a
stable code on failure:

    2  config error (unknown key, bad value)
    3  I/O error while writing outputs
    4  required corpus file missing
    5  acoustic-model bundle is not frozen
    6  required model bundle missing

The three evaluation arms (DNN baseline, BAT, SAT) share the one pretrained
acoustic-model bundle, so reported differences come from adaptation alone.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evaluate, models, synthdata, training
from .models import AssessmentNetwork

EXIT_CONFIG, EXIT_IO, EXIT_NO_CORPUS, EXIT_UNFROZEN, EXIT_NO_BUNDLE = 2, 3, 4, 5, 6

# key -> (caster, default)
CONFIG_SCHEMA = {
    "seed": (int, 0),
    "K": (int, 10),
    "dim": (int, 20),
    "n_adult": (int, 2000),
    "n_child": (int, 2000),
    "within_class_std": (float, 1.0),
    "shift_coherence": (float, 0.6),
    "class_separation": (float, 3.5),
    "shift_profile": (str, ",".join(str(s) for s in synthdata.DEFAULT_SHIFT_PROFILE)),
    "split_train": (float, 0.7),
    "split_dev": (float, 0.15),
    "split_test": (float, 0.15),
    "assess_n": (int, 1500),
    "am_hidden": (str, "64,64"),
    "adapter_hidden": (str, "64"),
    "disc_hidden": (str, "64"),
    "pretrain_epochs": (int, 30),
    "pretrain_lr": (float, 0.1),
    "pretrain_batch": (int, 128),
    "pretrain_momentum": (float, 0.9),
    "mode": (str, "sat"),
    "reversal_coefficient": (float, 1.0),
    "update_scheme": (str, "gradient_reversal"),
    "lr_adapter": (float, 0.05),
    "lr_discriminator": (float, 0.2),
    "momentum": (float, 0.0),
    "epochs": (int, 30),
    "batch_size": (int, 128),
    "alpha_source": (str, "adapted"),
    "lambda_shape": (str, "ramp"),
    "assess_epochs": (int, 150),
    "assess_lr": (float, 0.05),
    "out_dir": (str, "run"),
}

ASSESS_MAGIC = b"SAAC"


class ConfigError(ValueError):
    pass


def load_run_config(path: str | None, overrides: dict) -> dict:
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}")
        raw = synthdata.parse_flat_config(text)
    unknown = set(raw) - set(CONFIG_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = {}
    for key, (cast, default) in CONFIG_SCHEMA.items():
        try:
            cfg[key] = cast(raw[key]) if key in raw else default
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}")
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    return cfg

def resolved_config_text(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in CONFIG_SCHEMA)


def fingerprint_config_text(cfg: dict) -> str:
    """Resolved config minus out_dir: where results land must not change
    what experiment they identify."""
    return "".join(f"{k}={cfg[k]}\n" for k in CONFIG_SCHEMA if k != "out_dir")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _gen_config(cfg: dict) -> synthdata.GeneratorConfig:
    return synthdata.GeneratorConfig(
        K=cfg["K"], dim=cfg["dim"], n_adult=cfg["n_adult"], n_child=cfg["n_child"],
        shift_profile=tuple(float(s) for s in cfg["shift_profile"].split(",")),
        within_class_std=cfg["within_class_std"],
        shift_coherence=cfg["shift_coherence"],
        class_separation=cfg["class_separation"], seed=cfg["seed"],
        split_fractions=(cfg["split_train"], cfg["split_dev"], cfg["split_test"]))


def _adv_config(cfg: dict) -> training.AdversarialConfig:
    return training.AdversarialConfig(
        mode=cfg["mode"], reversal_coefficient=cfg["reversal_coefficient"],
        update_scheme=cfg["update_scheme"], lr_adapter=cfg["lr_adapter"],
        lr_discriminator=cfg["lr_discriminator"], momentum=cfg["momentum"],
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        alpha_source=cfg["alpha_source"], lambda_shape=cfg["lambda_shape"])


def save_assessment_corpus(path, feats, pron, flu) -> None:
    import struct
    with open(path, "wb") as fh:
        fh.write(ASSESS_MAGIC)
        fh.write(struct.pack("<IIQ", 1, feats.shape[1], feats.shape[0]))
        fh.write(feats.astype("<f8").tobytes())
        fh.write(pron.astype("u1").tobytes())
        fh.write(flu.astype("u1").tobytes())


def load_assessment_corpus(path):
    import struct
    data = Path(path).read_bytes()
    if data[:4] != ASSESS_MAGIC:
        raise synthdata.FormatError("bad magic: not an assessment corpus")
    version, dim, n = struct.unpack_from("<IIQ", data, 4)
    if version != 1:
        raise synthdata.FormatError(f"unsupported assessment corpus version {version}")
    off = 20
    feats = np.frombuffer(data, dtype="<f8", count=n * dim, offset=off).reshape(n, dim).copy()
    off += 8 * n * dim
    pron = np.frombuffer(data, dtype="u1", count=n, offset=off).astype(np.int64)
    flu = np.frombuffer(data, dtype="u1", count=n, offset=off + n).astype(np.int64)
    return feats, pron, flu


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg: dict, out: Path, stem: str) -> None:
    (out / f"config.{stem}.resolved").write_text(resolved_config_text(cfg))


def cmd_gen(cfg: dict) -> int:
    out = _outdir(cfg)
    corpus = synthdata.generate_corpus(_gen_config(cfg))
    feats, pron, flu = synthdata.generate_assessment_corpus(cfg["assess_n"], cfg["seed"])
    try:
        synthdata.save_corpus(corpus, out / "corpus.saco")
        save_assessment_corpus(out / "assess.saac", feats, pron, flu)
        _write_resolved(cfg, out, "gen")
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {out / 'corpus.saco'} ({corpus.frames.shape[0]} frames) "
          f"and {out / 'assess.saac'}")
    return 0


def cmd_pretrain(cfg: dict) -> int:
    out = _outdir(cfg)
    corpus_path = out / "corpus.saco"
    if not corpus_path.exists():
        print(f"error: corpus missing: {corpus_path}", file=sys.stderr)
        return EXIT_NO_CORPUS
    corpus = synthdata.load_corpus(corpus_path)
    rng = np.random.default_rng(cfg["seed"])
    am = models.build_adult_am(cfg["dim"], _int_list(cfg["am_hidden"]), cfg["K"], rng=rng)
    log = training.pretrain_adult_am(
        am, corpus.training_view("train"), epochs=cfg["pretrain_epochs"],
        lr=cfg["pretrain_lr"], seed=cfg["seed"], batch_size=cfg["pretrain_batch"],
        momentum=cfg["pretrain_momentum"])
    models.save_adult_am(out / "am.bundle", am)
    log.write(out / "pretrain.log")
    _write_resolved(cfg, out, "pretrain")
    dev = corpus.subset("dev", "adult")
    acc = float((am.posteriors(dev.frames).argmax(axis=1) == dev.senone_labels).mean())
    print(f"pretrained AM frozen; adult dev senone accuracy {acc:.3f}")
    return 0


def cmd_adapt(cfg: dict) -> int:
    out = _outdir(cfg)
    am_path = out / "am.bundle"
    if not am_path.exists():
        print(f"error: acoustic-model bundle missing: {am_path}", file=sys.stderr)
        return EXIT_NO_BUNDLE
    corpus_path = out / "corpus.saco"
    if not corpus_path.exists():
        print(f"error: corpus missing: {corpus_path}", file=sys.stderr)
        return EXIT_NO_CORPUS
    am = models.load_adult_am(am_path)
    if not am.frozen:
        print("error: acoustic-model bundle is not frozen", file=sys.stderr)
        return EXIT_UNFROZEN
    corpus = synthdata.load_corpus(corpus_path)
    acfg = _adv_config(cfg)
    rng = np.random.default_rng(cfg["seed"])
    adapter = models.AdaptationNetwork(cfg["dim"], _int_list(cfg["adapter_hidden"]), rng=rng)
    disc = models.DomainDiscriminator(
        cfg["dim"], _int_list(cfg["disc_hidden"]),
        mode="senone_aware" if acfg.mode == "sat" else "binary",
        K=cfg["K"] if acfg.mode == "sat" else None, rng=rng)
    log = training.adversarial_train(adapter, am, disc,
                                     corpus.training_view("train"), acfg)
    models.save_adapter(out / f"adapter_{acfg.mode}.bundle", adapter)
    models.save_discriminator(out / f"disc_{acfg.mode}.bundle", disc)
    log.write(out / f"adapt_{acfg.mode}.log")
    _write_resolved(cfg, out, f"adapt_{acfg.mode}")
    print(f"adversarial training ({acfg.mode}) done; "
          f"final discriminator accuracy {log.records[-1].disc_acc:.3f}")
    return 0


def cmd_eval(cfg: dict) -> int:
    out = _outdir(cfg)
    am_path = out / "am.bundle"
    corpus_path = out / "corpus.saco"
    if not corpus_path.exists():
        print(f"error: corpus missing: {corpus_path}", file=sys.stderr)
        return EXIT_NO_CORPUS
    if not am_path.exists():
        print(f"error: acoustic-model bundle missing: {am_path}", file=sys.stderr)
        return EXIT_NO_BUNDLE
    am = models.load_adult_am(am_path)
    corpus = synthdata.load_corpus(corpus_path)
    report = evaluate.MetricsReport(
        fingerprint=evaluate.config_fingerprint(fingerprint_config_text(cfg), cfg["seed"]),
        seed=cfg["seed"])

    errors = {"dnn": evaluate.child_senone_error(am, corpus, None)}
    report.set("senone_err.child.test.dnn", errors["dnn"])
    test = corpus.subset("test")
    for mode in ("bat", "sat"):
        a_path = out / f"adapter_{mode}.bundle"
        d_path = out / f"disc_{mode}.bundle"
        if not a_path.exists():
            continue
        adapter = models.load_adapter(a_path)
        errors[mode] = evaluate.child_senone_error(am, corpus, adapter)
        report.set(f"senone_err.child.test.{mode}", errors[mode])
        if d_path.exists():
            disc = models.load_discriminator(d_path)
            acc, conf = evaluate.domain_confusion(disc, adapter, test)
            report.set(f"disc_acc.test.{mode}", 100.0 * acc)
            report.set(f"disc_conf.test.{mode}", conf)
    if "bat" in errors and "sat" in errors:
        report.set("senone_err.rel_reduction.sat_vs_bat",
                   evaluate.relative_reduction(errors["bat"], errors["sat"]))
    if "sat" in errors:
        report.set("senone_err.abs_reduction.sat_vs_dnn",
                   evaluate.absolute_reduction(errors["dnn"], errors["sat"]))

    assess_path = out / "assess.saac"
    if assess_path.exists():
        feats, pron, flu = load_assessment_corpus(assess_path)
        n_train = int(0.8 * len(feats))
        net = AssessmentNetwork(input_dim=feats.shape[1],
                                rng=np.random.default_rng(cfg["seed"]))
        training.train_assessment_network(
            net, feats[:n_train], pron[:n_train], flu[:n_train],
            epochs=cfg["assess_epochs"], lr=cfg["assess_lr"], seed=cfg["seed"])
        for name, val in evaluate.assessment_metrics(
                net, feats[n_train:], pron[n_train:], flu[n_train:]).items():
            report.set(f"assess.{name}", val)

    evaluate.write_report(report, out / "report.tsv")
    _write_resolved(cfg, out, "eval")
    print(f"wrote {out / 'report.tsv'} with {len(report.metrics)} metrics")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="senadapt",
        description="synthetic child-to-adult adversarial adaptation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "pretrain", "adapt", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        if name == "adapt":
            p.add_argument("--mode", choices=("bat", "sat"), default=None)
    args = parser.parse_args(argv)

    overrides = {"seed": args.seed, "out_dir": args.out}
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    try:
        cfg = load_run_config(args.config, overrides)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    handler = {"gen": cmd_gen, "pretrain": cmd_pretrain,
               "adapt": cmd_adapt, "eval": cmd_eval}[args.command]
    return handler(cfg)


if __name__ == "__main__":
    sys.exit(main())

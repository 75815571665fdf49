"""Pipeline stages behind the CLI subcommands.

Every stage reads its inputs from and writes its outputs under the run's
output root, then records content hashes of both in ``run_manifest.json``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import afs as afs_mod
from . import plots
from .afg import AFG, AFGConfig, build_afg_batch, encode_mixed_label, read_afg_dataset, select_channels, write_afg_dataset
from .attacks import AttackConfig, attack_dataset, load_records, save_records, success_summary
from .classifier import TrainSettings, accuracy, batch_features, build_model, default_arch, load_snapshot, save_snapshot
from .classifier import train as train_model
from .config import PipelineConfig
from .data import DatasetSplit, IngestOptions, load_dataset, load_split, make_synthetic, save_split, select_classes
from .errors import ConfigurationError, DependencyError
from .evaluation import (EvalReport, backend_comparison, channel_ablation, clean_afg_accuracy, cross_attack_matrix,
                         cross_model_transfer, detection_accuracy, fingerprint, flatten_reports,
                         permuted_label_control, recognition_iou, write_reports, read_reports)
from .groupviz import AscentOptions, NMFOptions, group_features_for_layer
from .multilabel import (RecognizerSettings, binary_mode_train, detector_baseline_train, load_recognizer,
                         save_recognizer, train_recognizer)

log = logging.getLogger(__name__)

MANIFEST = "run_manifest.json"


# --- bookkeeping -------------------------------------------------------------------

def blob_hash(path: Path) -> str:
    """Git blob id of a file's content."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_paths(root: Path, paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            try:
                key = str(f.relative_to(root))
            except ValueError:
                key = str(f)
            out[key] = blob_hash(f)
    return out


def _record(cfg: PipelineConfig, command: str, inputs, outputs) -> dict:
    root = cfg.root
    path = root / MANIFEST
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    manifest["config_hash"] = cfg.hash()
    entry = {"config_hash": cfg.hash(), "inputs": _hash_paths(root, inputs), "outputs": _hash_paths(root, outputs)}
    manifest["commands"][command] = entry
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return entry


def _need(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {what} at {path}; run `afg-lab {producer}` first")
    return path


def paths(cfg: PipelineConfig) -> dict:
    root = cfg.root
    return {"dataset": root / "dataset", "model": root / "first_model.afgm", "attacks": root / "attacks",
            "afs": root / "afs", "groupviz": root / "groupviz", "afg": root / "afg",
            "recognizers": root / "recognizers", "reports": root / "reports"}


def _settings(sec, cls):
    return cls(lr=sec.lr, momentum=sec.momentum, epochs=sec.epochs, batch_size=sec.batch_size,
               weight_decay=sec.weight_decay, seed=sec.seed)


def _recognizer_settings(cfg: PipelineConfig) -> RecognizerSettings:
    hyper = _settings(cfg.recognizer, RecognizerSettings)
    hyper.grid = _afg_config(cfg).grid
    return hyper


def _afg_config(cfg: PipelineConfig) -> AFGConfig:
    g = cfg.groupviz
    return AFGConfig(g.r, NMFOptions(g.nmf_iters, g.nmf_tol, g.nmf_seed),
                     AscentOptions(g.steps, g.step_size, g.init_low, g.init_high, g.jitter, g.seed, g.chunk))


def _attack_config(sec) -> AttackConfig:
    return AttackConfig(sec.name, sec.epsilon, sec.iterations, sec.step_size, sec.overshoot)


def _chunked(fn, items, jobs: int):
    """Apply ``fn`` to contiguous chunks of ``items`` on ``jobs`` threads.

    Chunk results are concatenated in input order, so the output matches the
    serial run as a set; float reductions inside torch may still differ in
    the last bits across thread counts.
    """
    if jobs <= 1 or len(items) < 2:
        return fn(items)
    bounds = np.linspace(0, len(items), min(jobs, len(items)) + 1).astype(int)
    parts = [items[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(fn, parts))
    if isinstance(results[0], np.ndarray):
        return np.concatenate(results)
    return [x for r in results for x in r]


def afg_subset(split: DatasetSplit, per_class: int, part: str) -> list:
    """The first ``per_class`` examples of each class, in split order."""
    counts, out = {}, []
    for ex in getattr(split, part):
        if counts.get(ex.label, 0) < per_class:
            out.append(ex)
            counts[ex.label] = counts.get(ex.label, 0) + 1
    return out


# --- stages ------------------------------------------------------------------------

def prepare_data(cfg: PipelineConfig) -> DatasetSplit:
    d = cfg.dataset
    src = cfg.resolve(d.source)
    if not src.exists():
        if not d.synthetic:
            raise ConfigurationError(f"dataset.source does not exist: {src}")
        log.info("generating procedural dataset under %s", src)
        make_synthetic(src, d.per_class, d.synthetic_seed, d.image_shape[0], d.image_shape[2])
    split = load_dataset(src, IngestOptions(d.train_fraction, d.seed, tuple(d.image_shape)))
    split.meta["source"] = d.source  # as configured, so relocated runs hash identically
    if d.classes:
        split = select_classes(split, d.classes, d.seed)
    save_split(split, paths(cfg)["dataset"])
    return split


def cmd_train_first(cfg: PipelineConfig) -> Path:
    p = paths(cfg)
    split = prepare_data(cfg)
    m = cfg.model
    arch = default_arch(split.train[0].pixels.shape, split.num_classes, tuple(m.widths), m.hidden)
    model = build_model(arch, m.seed)
    model = train_model(model, split, _settings(m, TrainSettings),
                        log=lambda e, loss: log.info("first model epoch %d loss %.4f", e, loss))
    log.info("first model: train acc %.4f test acc %.4f", model.meta["train_accuracy"], model.meta["test_accuracy"])
    save_snapshot(model, p["model"])
    _record(cfg, "train-first", [], [p["dataset"], p["model"]])
    return p["model"]


def _load_base(cfg: PipelineConfig):
    p = paths(cfg)
    model = load_snapshot(_need(p["model"], "first model snapshot", "train-first"))
    split = load_split(_need(p["dataset"], "dataset split", "train-first"))
    return model, split


def _attack_targets(cfg: PipelineConfig, split: DatasetSplit) -> list:
    """AFG training subset plus the whole test split (AFS curves use it)."""
    train_sub = afg_subset(split, cfg.afg.train_per_class, "train")
    return train_sub + (split.test if cfg.afs.split == "test" else afg_subset(split, cfg.afg.test_per_class, "test"))


def cmd_attack(cfg: PipelineConfig, jobs: int = 1) -> dict:
    p = paths(cfg)
    model, split = _load_base(cfg)
    targets = _attack_targets(cfg, split)
    out = {}
    for sec in cfg.attacks:
        acfg = _attack_config(sec)
        records = _chunked(lambda part: attack_dataset(model, part, acfg), targets, jobs)
        save_records(records, p["attacks"] / acfg.name)
        out[acfg.name] = success_summary(records)
    _record(cfg, "attack", [p["model"], p["dataset"]], [p["attacks"]])
    return out


def _records_for(cfg: PipelineConfig, name: str):
    path = paths(cfg)["attacks"] / name.upper()
    _need(path / "attacks.json", f"attack manifest for {name.upper()}", "attack")
    return load_records(path)


def cmd_afs(cfg: PipelineConfig) -> dict:
    p = paths(cfg)
    model, split = _load_base(cfg)
    uids = {ex.uid for ex in getattr(split, cfg.afs.split)}
    p["afs"].mkdir(parents=True, exist_ok=True)
    out, outputs = {}, []
    for name in cfg.afs.attacks:
        recs = [r for r in _records_for(cfg, name) if r.original.uid in uids and r.clean_correct]
        ok = afs_mod.successful(recs)
        curve = afs_mod.afs_curve(model, ok)
        noise = afs_mod.noise_control_curve(model, ok, cfg.afs.noise_seed)
        csv_path = afs_mod.write_curve_csv(curve, p["afs"] / f"{name.upper()}.csv")
        noise_path = afs_mod.write_curve_csv(noise, p["afs"] / f"{name.upper()}_noise.csv")
        plots.plot_afs(csv_path, p["afs"] / f"{name.upper()}.png", p["afs"] / f"{name.upper()}_plot.csv")
        outputs += [csv_path, noise_path, p["afs"] / f"{name.upper()}.png"]
        out[name.upper()] = {"curve": curve, "noise": noise}
    _record(cfg, "afs", [p["model"], p["attacks"]], outputs)
    return out


def cmd_groupviz(cfg: PipelineConfig) -> list[Path]:
    """Montages of group features for a few test images and their adversarial versions."""
    p = paths(cfg)
    model, split = _load_base(cfg)
    g = cfg.groupviz
    afg_cfg = _afg_config(cfg)
    p["groupviz"].mkdir(parents=True, exist_ok=True)
    records = {r.original.uid: r for r in _records_for(cfg, cfg.attacks[0].name)}
    written = []
    for ex in split.test[:g.montage_images]:
        inputs = [("clean", ex.pixels)]
        rec = records.get(ex.uid)
        if rec is not None and rec.success:
            inputs.append((rec.attack.name, rec.adversarial))
        for tag, pix in inputs:
            rows = [group_features_for_layer(model, pix, li, g.r, afg_cfg.nmf, afg_cfg.ascent)
                    for li in range(model.num_layers)]
            stem = f"{ex.uid.replace('/', '_').rsplit('.', 1)[0]}_{tag}"
            plots.montage(rows, p["groupviz"] / f"{stem}.png", p["groupviz"] / f"{stem}.csv")
            written.append(p["groupviz"] / f"{stem}.png")
    _record(cfg, "groupviz", [p["model"], p["attacks"]], written)
    return written


def cmd_build_afg(cfg: PipelineConfig, jobs: int = 1) -> dict:
    p = paths(cfg)
    model, split = _load_base(cfg)
    records = {name.upper(): {r.original.uid: r for r in _records_for(cfg, name)} for name in cfg.afg.attacks}
    afg_cfg = _afg_config(cfg)
    k = split.num_classes
    model_id = f"{model.checksum():08x}"
    meta = {"r": afg_cfg.r, "s": model.input_shape[0], "n_layers": model.num_layers, "layer_names": model.layer_names,
            "groupviz": asdict(cfg.groupviz), "model_id": model_id, "k_orig": k}
    counts = {}
    for part, per in (("train", cfg.afg.train_per_class), ("test", cfg.afg.test_per_class)):
        subset = afg_subset(split, per, part)
        items = []
        build = lambda pix: build_afg_batch(model, pix, afg_cfg)
        clean = _chunked(build, np.stack([ex.pixels for ex in subset]), jobs)
        for ex, t in zip(subset, clean):
            items.append(AFG(t, encode_mixed_label(ex.label, None, k),
                             {"uid": ex.uid, "attack": "clean", "model": model_id, "part": part}))
        for name, by_uid in records.items():
            recs = [by_uid[ex.uid] for ex in subset if ex.uid in by_uid]
            recs = [r for r in recs if r.clean_correct and r.success]
            if not recs:
                continue
            adv = _chunked(build, np.stack([r.adversarial for r in recs]), jobs)
            for r, t in zip(recs, adv):
                items.append(AFG(t, encode_mixed_label(r.true_label, r.adv_label, k),
                                 {"uid": r.original.uid, "attack": name, "model": model_id, "part": part}))
        write_afg_dataset(p["afg"] / part, items, meta)
        counts[part] = {tag: sum(a.provenance["attack"] == tag for a in items)
                        for tag in ["clean"] + list(records)}
    _record(cfg, "build-afg", [p["model"], p["attacks"]], [p["afg"]])
    return counts


def load_afgs(cfg: PipelineConfig, part: str, root: Path | None = None) -> tuple[list[AFG], dict]:
    base = (root or cfg.root) / "afg" / part
    _need(base / "manifest.json", f"{part} AFG dataset", "build-afg")
    items, meta = read_afg_dataset(base)
    if cfg.afg.policy.upper() != "ALL":
        items = [select_channels(a, cfg.afg.policy) for a in items]
    return items, meta


def by_attack(items: list[AFG], attack: str, include_clean: bool = True) -> list[AFG]:
    return [a for a in items if a.provenance["attack"] == attack.upper()
            or (include_clean and a.provenance["attack"] == "clean")]


def _recognizer_path(cfg: PipelineConfig, attack: str, backend: str | None = None) -> Path:
    backend = backend or cfg.recognizer.backend
    return paths(cfg)["recognizers"] / f"mixed_{attack.upper()}_{backend}_{cfg.afg.policy.upper()}.afgm"


def cmd_train_recognizer(cfg: PipelineConfig) -> dict:
    p = paths(cfg)
    train, _ = load_afgs(cfg, "train")
    hyper = _recognizer_settings(cfg)
    out = {}
    for name in cfg.afg.attacks:
        items = by_attack(train, name)
        rec = train_recognizer(items, cfg.recognizer.backend, hyper, tau=cfg.afg.tau)
        out[name.upper()] = save_recognizer(rec, _recognizer_path(cfg, name))
    _record(cfg, "train-recognizer", [p["afg"] / "train"], list(out.values()))
    return out


def _deepest_features(model, pixels):
    return batch_features(model, pixels)[-1]


def cmd_evaluate(cfg: PipelineConfig, substitute=None) -> dict:
    """Run the configured suites and write the reports.

    ``substitute(mode, k_orig)``, when given, replaces every trained or loaded
    recognizer (harness self-test); the detector and first-model baselines are
    then skipped and nothing is written.
    """
    p = paths(cfg)
    ev = cfg.evaluate
    train, meta = load_afgs(cfg, "train")
    test, _ = load_afgs(cfg, "test")
    hyper = _recognizer_settings(cfg)
    decode = cfg.recognizer.decode
    k_orig = int(meta["k_orig"])
    base_ctx = {"model": meta["model_id"], "policy": cfg.afg.policy, "backend": cfg.recognizer.backend,
                "seed": cfg.recognizer.seed, "config": cfg.hash()[:16]}
    if substitute is not None:
        base_ctx["substitute"] = getattr(substitute, "__name__", type(substitute).__name__)
    results: dict = {}
    inputs = [p["afg"]]

    def fit_mode(items, backend, mode="mixed"):
        if substitute is not None:
            return substitute(mode, k_orig)
        if mode == "binary":
            return binary_mode_train(items, backend, hyper)
        return train_recognizer(items, backend, hyper, mode=mode)

    trainer = lambda items, backend: fit_mode(items, backend)  # noqa: E731

    if "detection" in ev.suites:
        model, split = _load_base(cfg)
        det_hyper = TrainSettings(lr=ev.detector_lr, epochs=ev.detector_epochs, batch_size=32, seed=cfg.recognizer.seed)
        table = {}
        for name in cfg.afg.attacks:
            tr, te = by_attack(train, name), by_attack(test, name)
            if not any(a.label.is_adversarial for a in te):
                continue
            ctx = dict(base_ctx, attack=name.upper(), suite="detection")
            rec = fit_mode(tr, cfg.recognizer.backend, "binary")
            afg_rep = detection_accuracy(rec, te, ctx, f"detection_accuracy[{name.upper()}]")
            if substitute is not None:
                table[name.upper()] = {"afg": afg_rep}
                continue
            recs = {r.original.uid: r for r in _records_for(cfg, name)}
            pixels = {ex.uid: ex.pixels for ex in split.train + split.test}
            feats = {}
            for part, items in (("train", tr), ("test", te)):
                adv_uids = [a.provenance["uid"] for a in items if a.label.is_adversarial]
                clean_uids = [a.provenance["uid"] for a in items if not a.label.is_adversarial]
                feats[part] = (_deepest_features(model, np.stack([pixels[u] for u in clean_uids])),
                               _deepest_features(model, np.stack([recs[u].adversarial for u in adv_uids])))
            det = detector_baseline_train(feats["train"][0], feats["train"][1], model.num_layers - 1, det_hyper,
                                          clean_test=feats["test"][0], adversarial_test=feats["test"][1])
            det_rep = EvalReport(f"detector_accuracy[{name.upper()}]", det.accuracy, det.n_test, fingerprint(dict(ctx, method="detector")))
            table[name.upper()] = {"afg": afg_rep, "detector": det_rep}
        results["detection"] = table
        inputs += [p["model"], p["attacks"]]

    if "class" in ev.suites:
        model, split = _load_base(cfg)
        tr = by_attack(train, "none")
        te = by_attack(test, "none")
        rec = fit_mode(tr, cfg.recognizer.backend, "single")
        ctx = dict(base_ctx, suite="class")
        test_sub = afg_subset(split, cfg.afg.test_per_class, "test")
        results["class"] = {"afg": clean_afg_accuracy(rec, te, ctx)}
        if substitute is None:
            results["class"]["first_model"] = EvalReport(
                "first_model_accuracy", accuracy(model, test_sub), len(test_sub),
                fingerprint(dict(ctx, method="first_model")))
            results["class"]["first_model_full_test"] = EvalReport(
                "first_model_test_accuracy", accuracy(model, split.test), len(split.test),
                fingerprint(dict(ctx, method="first_model_full")))

    recognizers = {}
    if {"recognition", "cross_attack", "cross_model"} & set(ev.suites):
        for name in cfg.afg.attacks:
            if substitute is not None:
                recognizers[name.upper()] = substitute("mixed", k_orig)
                continue
            path = _need(_recognizer_path(cfg, name), f"{name.upper()} recognizer", "train-recognizer")
            recognizers[name.upper()] = load_recognizer(path)
            inputs.append(path)

    if "recognition" in ev.suites:
        table = {}
        for name, rec in recognizers.items():
            te = by_attack(test, name)
            ctx = dict(base_ctx, attack=name, suite="recognition")
            table[name] = {"split": recognition_iou(rec, te, "split", ctx, f"iou[{name}]/split"),
                           "top2": recognition_iou(rec, te, "top2", ctx, f"iou[{name}]/top2")}
            for subset, keep in (("clean_only", False), ("adversarial_only", True)):
                sub = [a for a in te if a.label.is_adversarial == keep]
                table[name][subset] = (recognition_iou(rec, sub, decode, dict(ctx, subset=subset),
                                                       f"iou[{name}]/{subset}") if sub else None)
        control_attack = ev.ablation_attack.upper() if ev.ablation_attack.upper() in recognizers else next(iter(recognizers))
        table["control"] = {"attack": control_attack, "permuted": permuted_label_control(
            by_attack(train, control_attack), by_attack(test, control_attack), cfg.recognizer.backend, hyper,
            ev.control_seed, decode, dict(base_ctx, attack=control_attack), trainer)}
        results["recognition"] = table

    if "cross_attack" in ev.suites and len(recognizers) >= 2:
        datasets = {name: by_attack(test, name) for name in recognizers}
        matrix = cross_attack_matrix(recognizers, datasets, decode, base_ctx)
        results["cross_attack"] = {f"{a}->{b}": v for (a, b), v in matrix.items()}

    if "cross_model" in ev.suites:
        if not ev.transfer_from:
            raise ConfigurationError("evaluate.transfer_from must name another run's output root for cross_model")
        other_root = cfg.resolve(ev.transfer_from)
        other, _ = load_afgs(cfg, "test", other_root)
        table = {}
        for a, rec in recognizers.items():
            for b in cfg.afg.attacks:
                items = by_attack(other, b)
                table[f"{a}->{b.upper()}"] = cross_model_transfer(
                    rec, items, None, decode, dict(base_ctx, train_attack=a, eval_attack=b.upper(), other=str(other_root)))
        results["cross_model"] = table
        inputs.append(other_root / "afg" / "test")

    abl_attack = ev.ablation_attack.upper()
    if "ablation" in ev.suites:
        n = train[0].num_channels
        from .afg import resolve_policy
        usable, skipped = [], []
        for pol in ev.policies:
            try:
                resolve_policy(pol, n)
                usable.append(pol)
            except ConfigurationError as exc:
                skipped.append({"policy": pol.upper(), "reason": str(exc)})
        rows = channel_ablation(by_attack(train, abl_attack), by_attack(test, abl_attack), usable,
                                cfg.recognizer.backend, hyper, decode, dict(base_ctx, attack=abl_attack), trainer)
        results["ablation"] = {"rows": rows, "skipped": skipped}

    if "backends" in ev.suites:
        results["backends"] = backend_comparison(by_attack(train, abl_attack), by_attack(test, abl_attack),
                                                 ev.backends, hyper, decode, dict(base_ctx, attack=abl_attack), trainer)
    if substitute is not None:
        return results

    p["reports"].mkdir(parents=True, exist_ok=True)
    reports = flatten_reports(results)
    write_reports(reports, p["reports"] / "report.json", p["reports"] / "report.csv")
    (p["reports"] / "tables.json").write_text(json.dumps(_tables(results), indent=1, sort_keys=True),
                                              encoding="utf-8")
    text, _ = plots.render_tables(reports)
    (p["reports"] / "tables.txt").write_text(text, encoding="utf-8")
    _record(cfg, "evaluate", inputs, [p["reports"]])
    return results


def _tables(obj):
    """JSON-friendly mirror of the nested result structure."""
    if isinstance(obj, EvalReport):
        return asdict(obj)
    if isinstance(obj, dict):
        return {str(k): _tables(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_tables(v) for v in obj]
    return obj


def cmd_report(cfg: PipelineConfig, dump_data: bool = False) -> str:
    p = paths(cfg)
    reports = read_reports(_need(p["reports"] / "report.json", "evaluation report", "evaluate"))
    text, csv_text = plots.render_tables(reports)
    (p["reports"] / "tables.txt").write_text(text, encoding="utf-8")
    (p["reports"] / "tables.csv").write_text(csv_text, encoding="utf-8")
    if dump_data:
        for name in cfg.afs.attacks:
            curve = p["afs"] / f"{name.upper()}.csv"
            if curve.exists():
                plots.plot_afs(curve, None, p["reports"] / f"afs_{name.upper()}_plot.csv")
    return text

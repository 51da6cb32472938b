"""Resumable pipeline stages over a run directory.

Layout under <out_dir>:
    config.resolved.json
    dataset/<device>_<domain>.iq + dataset_manifest.json
    slices/slices_T.npz, slices_S.npz, slices_meta.json
    split/split_manifest.json
    baseline/baseline_<variant>.ckpt, baseline_training_log.csv
    reveal/reveal_dev<i>.ckpt, reveal_dev<i>_losses.csv, customization.json
    metrics/*.json, *.csv
    report/summary.csv, summary.txt, figures/*.png

Every artifact embeds the resolved config hash; stages skip work when their
outputs already exist under the same hash and refuse to mix hashes.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import baseline, radiosim, reveal
from .authmetrics import (
    ConfusionMatrix,
    MetricsReport,
    hypothesis_probability_table,
    improvement,
    max_rule,
    mean_softmax_by_device,
    pstest,
    rrp,
)
from .config import RunConfig
from .errors import ConfigError, DataError, LabelMismatch
from .iqdata import (
    SliceSet,
    SplitManifest,
    build_splits,
    iq_filename,
    merge_slice_sets,
    parse_iq_filename,
    read_iq_file,
    slice_recording,
)

STAGES = (
    "simulate",
    "slice",
    "split",
    "train-baseline",
    "evaluate-baseline",
    "train-reveal",
    "evaluate-translated",
    "adversarial",
    "report",
)


def _say(msg: str):
    print(f"[rfauth] {msg}", flush=True)


def _write_json(path: Path, doc: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def _load_json(path: Path) -> dict:
    return json.loads(path.read_text())


def _check_hash(doc_hash, config: RunConfig, artifact: str):
    if doc_hash != config.config_hash():
        raise ConfigError(
            f"{artifact} was produced under config hash {doc_hash}, "
            f"current config hash is {config.config_hash()}; refusing to mix runs"
        )


def _set_determinism(config: RunConfig):
    if config["deterministic"]:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def write_resolved_config(config: RunConfig):
    path = config.out_dir / "config.resolved.json"
    doc = dict(config.data)
    doc["config_hash"] = config.config_hash()
    _write_json(path, doc)


# ---------------------------------------------------------------- simulate


def stage_simulate(config: RunConfig) -> Path:
    """Generate the synthetic dataset (or validate an external directory)."""
    ds = config["dataset"]
    out = config.out_dir / "dataset"
    manifest_path = out / "dataset_manifest.json"
    if ds["source"] != "simulated":
        return Path(ds["source"])
    if manifest_path.exists():
        doc = _load_json(manifest_path)
        if doc.get("config_hash") == config.config_hash():
            _say("simulate: reusing existing dataset")
            return out
    out.mkdir(parents=True, exist_ok=True)
    fleet = radiosim.make_fleet(
        int(ds["n_devices"]), int(ds["fleet_seed"]), ds.get("impairment_ranges")
    )
    channels = {
        ds["domain_T"]: radiosim.make_channel(ds["domain_T"], **ds["channel_T"]),
        ds["domain_S"]: radiosim.make_channel(ds["domain_S"], **ds["channel_S"]),
    }
    waveform = radiosim.WaveformSpec(**ds["waveform"])
    recordings = radiosim.generate_dataset(
        fleet, channels, waveform, int(ds["samples_per_device"]), out_dir=out, seed=config.seed
    )
    _write_json(
        manifest_path,
        {
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "devices": list(range(len(fleet))),
            "domains": [ds["domain_T"], ds["domain_S"]],
            "files": {
                iq_filename(d, dom): rec.sample_count for (d, dom), rec in recordings.items()
            },
        },
    )
    _say(f"simulate: wrote {len(recordings)} recordings to {out}")
    return out


# ------------------------------------------------------------------- slice


def _slice_domain(config: RunConfig, dataset_dir: Path, domain: str) -> SliceSet:
    sl = config["slicing"]
    files = sorted(dataset_dir.glob(f"*_{domain}.iq"))
    if not files:
        raise DataError(f"no .iq files for domain {domain!r} in {dataset_dir}")
    sets = []
    for f in files:
        device_id, domain_id = parse_iq_filename(f.name)
        if domain_id != domain:
            continue
        rec = read_iq_file(f, device_id, domain_id)
        sets.append(
            slice_recording(
                rec,
                int(sl["slice_length"]),
                int(sl["stride"]),
                int(sl["max_slices"]),
                bool(sl["normalize"]),
            )
        )
    return merge_slice_sets(sets)


def stage_slice(config: RunConfig, dataset_dir: Path | None = None):
    ds = config["dataset"]
    dataset_dir = dataset_dir or (
        config.out_dir / "dataset" if ds["source"] == "simulated" else Path(ds["source"])
    )
    out = config.out_dir / "slices"
    meta_path = out / "slices_meta.json"
    if meta_path.exists():
        doc = _load_json(meta_path)
        if doc.get("config_hash") == config.config_hash():
            _say("slice: reusing existing slice pools")
            return SliceSet.load(out / "slices_T.npz"), SliceSet.load(out / "slices_S.npz")
    out.mkdir(parents=True, exist_ok=True)
    ss_T = _slice_domain(config, dataset_dir, ds["domain_T"])
    ss_S = _slice_domain(config, dataset_dir, ds["domain_S"])
    ss_T.save(out / "slices_T.npz")
    ss_S.save(out / "slices_S.npz")
    _write_json(
        meta_path,
        {
            "config_hash": config.config_hash(),
            "n_slices_T": len(ss_T),
            "n_slices_S": len(ss_S),
            "devices": ss_T.device_ids,
        },
    )
    _say(f"slice: {len(ss_T)} domain-T and {len(ss_S)} domain-S slices")
    return ss_T, ss_S


# ------------------------------------------------------------------- split


def stage_split(config: RunConfig, ss_T: SliceSet, ss_S: SliceSet) -> SplitManifest:
    path = config.out_dir / "split" / "split_manifest.json"
    if path.exists():
        doc = _load_json(path)
        if doc.get("config_hash") == config.config_hash():
            _say("split: reusing existing manifest")
            return SplitManifest.from_json(path.read_text())
    manifest = build_splits(ss_T, ss_S, config.seed)
    doc = json.loads(manifest.to_json())
    doc["config_hash"] = config.config_hash()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))
    _say(
        f"split: T {len(manifest.base_train)}/{len(manifest.base_val)}/{len(manifest.base_test)}"
        f", reveal T/S {len(manifest.reveal_train_T)}/{len(manifest.reveal_train_S)}"
    )
    return manifest


# --------------------------------------------------------------- baseline


def _baseline_ckpt_path(config: RunConfig) -> Path:
    return config.out_dir / "baseline" / f"baseline_{config['classifier']['variant']}.ckpt"


def stage_train_baseline(
    config: RunConfig, ss_T: SliceSet, manifest: SplitManifest
) -> baseline.ClassifierModel:
    cl = config["classifier"]
    path = _baseline_ckpt_path(config)
    if path.exists():
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("config_hash") == config.config_hash():
            _say("train-baseline: reusing existing checkpoint")
            model = baseline.load_checkpoint(path)
            return model
    _set_determinism(config)
    n_classes = len(ss_T.device_ids)
    model = baseline.build_classifier(
        cl["variant"], n_classes, int(config["slicing"]["slice_length"]),
        cl["n_filters"], seed=config.seed,
    )
    train = ss_T.subset(manifest.base_train)
    val = ss_T.subset(manifest.base_val)
    tc = baseline.TrainConfig(
        learning_rate=float(cl["learning_rate"]),
        batch_size=int(cl["batch_size"]),
        epochs=int(cl["epochs"]),
        seed=config.seed,
        target_val_accuracy=cl["target_val_accuracy"],
        patience=cl["patience"],
    )
    baseline.train_classifier(model, train, val, tc)
    baseline.save_checkpoint(model, path)
    blob = torch.load(path, map_location="cpu", weights_only=True)
    blob["config_hash"] = config.config_hash()
    torch.save(blob, path)
    baseline.write_training_log(model, config.out_dir / "baseline" / "baseline_training_log.csv")
    best = max(r.val_accuracy for r in model.training_log)
    _say(f"train-baseline: {len(model.training_log)} epochs, best val acc {best:.3f}")
    return model


def load_baseline(config: RunConfig) -> baseline.ClassifierModel:
    path = _baseline_ckpt_path(config)
    if not path.exists():
        raise DataError(f"baseline checkpoint {path} missing; run train-baseline first")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    _check_hash(blob.get("config_hash"), config, "baseline checkpoint")
    return baseline.load_checkpoint(path)


# -------------------------------------------------------------- evaluation


def _eval_subset(config: RunConfig, ss_S: SliceSet, manifest: SplitManifest) -> SliceSet:
    """Evaluation pool: the first max_slices_per_device ttod_eval indices per device."""
    cap = config["evaluation"]["max_slices_per_device"]
    idx = np.asarray(manifest.ttod_eval_S, dtype=np.int64)
    if cap is None:
        return ss_S.subset(idx)
    cap = int(cap)
    keep = []
    labels = ss_S.labels[idx]
    for d in np.unique(labels):
        keep.extend(idx[labels == d][:cap])
    return ss_S.subset(np.asarray(sorted(keep), dtype=np.int64))


def stage_evaluate_baseline(
    config: RunConfig,
    model: baseline.ClassifierModel,
    ss_T: SliceSet,
    ss_S: SliceSet,
    manifest: SplitManifest,
) -> MetricsReport:
    path = config.out_dir / "metrics" / "metrics_baseline.json"
    if path.exists():
        doc = _load_json(path)
        if doc.get("extra", {}).get("config_hash") == config.config_hash():
            _say("evaluate-baseline: reusing existing metrics")
            return MetricsReport.from_json(path.read_text())
    n = model.n_classes
    test = ss_T.subset(manifest.base_test)
    out_ttsd = baseline.classify(model, test)
    ttsd = pstest(out_ttsd, test.labels)
    ev = _eval_subset(config, ss_S, manifest)
    out_raw = baseline.classify(model, ev)
    ttod_raw = pstest(out_raw, ev.labels)
    softmax_rows = mean_softmax_by_device(out_raw.probabilities, ev.labels, n)
    rrp_raw = rrp(softmax_rows)
    confusion = ConfusionMatrix.from_predictions(ev.labels, out_raw.predicted, n)
    report = MetricsReport(
        pstest_pct=ttod_raw,
        ttsd_pct=ttsd,
        ttod_pct=ttod_raw,
        rrp_pct=rrp_raw,
        per_device_softmax=[float(softmax_rows[i, i]) for i in range(n)],
        confusion=confusion,
        extra={
            "config_hash": config.config_hash(),
            "n_eval_slices": len(ev),
            "ttsd_confusion": ConfusionMatrix.from_predictions(
                test.labels, out_ttsd.predicted, n
            ).to_lists(),
        },
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    confusion.to_csv(config.out_dir / "metrics" / "confusion_ttod_raw.csv")
    _say(f"evaluate-baseline: TTSD {ttsd:.1f}%, raw TTOD {ttod_raw:.1f}%, RRP {rrp_raw:.1f}%")
    return report


# ------------------------------------------------------------------ reveal


def _reveal_ckpt_path(config: RunConfig, device_id: int) -> Path:
    return config.out_dir / "reveal" / f"reveal_dev{device_id}.ckpt"


def _device_sets(ss: SliceSet, indices, device_id: int) -> SliceSet:
    idx = np.asarray(indices, dtype=np.int64)
    return ss.subset(idx[ss.labels[idx] == device_id])


def stage_train_reveal(
    config: RunConfig,
    model: baseline.ClassifierModel,
    ss_T: SliceSet,
    ss_S: SliceSet,
    manifest: SplitManifest,
) -> dict:
    rv = config["reveal"]
    devices = ss_T.device_ids
    _set_determinism(config)
    pairs: dict[int, reveal.TranslatorPair] = {}
    todo = []
    for d in devices:
        path = _reveal_ckpt_path(config, d)
        if path.exists():
            blob = torch.load(path, map_location="cpu", weights_only=False)
            if blob.get("config_hash") == config.config_hash():
                pairs[d] = reveal.load_checkpoint(path)
                continue
        todo.append(d)
    if pairs:
        _say(f"train-reveal: reusing {sorted(pairs)} from checkpoints")
    if not todo:
        return pairs

    grid = rv["grid"]
    slice_length = int(config["slicing"]["slice_length"])

    # build serially (torch global RNG), train possibly in parallel
    built = {}
    for d in todo:
        built[d] = reveal.build_translator_pair(
            d,
            slice_length,
            cycle_weight=float(rv["cycle_weight"]),
            base_filters=int(rv["base_filters"]),
            disc_filters=int(rv["disc_filters"]),
            seed=config.seed * 1000 + d,
        )

    def train_one(d: int) -> reveal.TranslatorPair:
        s_set = _device_sets(ss_S, manifest.reveal_train_S, d)
        t_set = _device_sets(ss_T, manifest.reveal_train_T, d)
        candidates = [
            reveal.RevealTrainConfig(
                epochs=int(e),
                learning_rate=float(lr),
                batch_size=int(rv["batch_size"]),
                replay_size=int(rv["replay_size"]),
                seed=config.seed * 1000 + d,
            )
            for lr in grid["learning_rates"]
            for e in grid["epochs"]
        ]
        pair = reveal.customize_per_device(built[d], s_set, t_set, model, candidates)
        reveal.save_checkpoint(pair, _reveal_ckpt_path(config, d))
        blob = torch.load(_reveal_ckpt_path(config, d), map_location="cpu", weights_only=False)
        blob["config_hash"] = config.config_hash()
        torch.save(blob, _reveal_ckpt_path(config, d))
        reveal.write_loss_log(pair, config.out_dir / "reveal" / f"reveal_dev{d}_losses.csv")
        sel = pair.customization["selected"]
        _say(
            f"train-reveal: dev {d} selected epochs={sel['epochs']} "
            f"lr={sel['learning_rate']} val TTOD {sel['val_ttod']:.1f}%"
        )
        return pair

    jobs = max(1, int(config["jobs"]))
    if jobs == 1 or len(todo) == 1:
        for d in todo:
            pairs[d] = train_one(d)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for d, pair in zip(todo, pool.map(train_one, todo)):
                pairs[d] = pair
    _write_json(
        config.out_dir / "reveal" / "customization.json",
        {
            "config_hash": config.config_hash(),
            "devices": {str(d): pairs[d].customization for d in sorted(pairs)},
        },
    )
    return pairs


def load_translators(config: RunConfig, devices) -> dict:
    pairs = {}
    for d in devices:
        path = _reveal_ckpt_path(config, d)
        if not path.exists():
            raise DataError(f"translator checkpoint {path} missing; run train-reveal first")
        blob = torch.load(path, map_location="cpu", weights_only=False)
        _check_hash(blob.get("config_hash"), config, f"translator checkpoint dev {d}")
        pairs[d] = reveal.load_checkpoint(path)
    return pairs


def stage_evaluate_translated(
    config: RunConfig,
    model: baseline.ClassifierModel,
    pairs: dict,
    ss_S: SliceSet,
    manifest: SplitManifest,
) -> MetricsReport:
    """Translated TTOD/RRP plus the max-rule authentication report."""
    path = config.out_dir / "metrics" / "metrics_translated.json"
    if path.exists():
        doc = _load_json(path)
        if doc.get("extra", {}).get("config_hash") == config.config_hash():
            _say("evaluate-translated: reusing existing metrics")
            return MetricsReport.from_json(path.read_text())
    n = model.n_classes
    ev = _eval_subset(config, ss_S, manifest)
    out_raw = baseline.classify(model, ev)

    # per-hypothesis tables: classify the whole pool through every translator
    hyp_probs = {}
    for d, pair in sorted(pairs.items()):
        hyp_probs[d] = baseline.classify(model, reveal.translate(pair, ev)).probabilities

    # own-translator metrics (true label known at evaluation time)
    own_pred = np.empty(len(ev), dtype=np.int64)
    own_probs = np.empty((len(ev), n), dtype=np.float64)
    for d in sorted(pairs):
        mask = ev.labels == d
        own_probs[mask] = hyp_probs[d][mask]
        own_pred[mask] = np.argmax(hyp_probs[d][mask], axis=1)
    ttod_translated = pstest(own_pred, ev.labels)
    translated_rows = mean_softmax_by_device(own_probs, ev.labels, n)
    rrp_translated = rrp(translated_rows)
    confusion_translated = ConfusionMatrix.from_predictions(ev.labels, own_pred, n)

    # max-rule authentication (true label unknown: every hypothesis runs)
    table = hypothesis_probability_table(hyp_probs)
    decision = max_rule(out_raw.probabilities, table)
    ttod_maxrule = pstest(decision.labels, ev.labels)
    maxrule_rows = mean_softmax_by_device(
        decision.scores / decision.scores.sum(axis=1, keepdims=True), ev.labels, n
    )
    rrp_maxrule = rrp(maxrule_rows)
    confusion_maxrule = ConfusionMatrix.from_predictions(ev.labels, decision.labels, n)

    ttod_raw = pstest(out_raw, ev.labels)
    report = MetricsReport(
        pstest_pct=ttod_maxrule,
        ttod_pct=ttod_maxrule,
        rrp_pct=rrp_maxrule,
        improvement_x=improvement(ttod_raw, ttod_maxrule) if ttod_raw > 0 else None,
        per_device_softmax=[float(translated_rows[i, i]) for i in range(n)],
        confusion=confusion_maxrule,
        extra={
            "config_hash": config.config_hash(),
            "ttod_raw": ttod_raw,
            "ttod_translated": ttod_translated,
            "ttod_maxrule": ttod_maxrule,
            "rrp_translated": rrp_translated,
            "rrp_maxrule": rrp_maxrule,
            "translated_won_pct": 100.0 * float(np.mean(decision.translated_won)),
            "confusion_translated": confusion_translated.to_lists(),
        },
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    confusion_translated.to_csv(config.out_dir / "metrics" / "confusion_ttod_translated.csv")
    confusion_maxrule.to_csv(config.out_dir / "metrics" / "confusion_maxrule.csv")
    _say(
        f"evaluate-translated: TTOD raw {ttod_raw:.1f}% -> translated {ttod_translated:.1f}%"
        f" -> max-rule {ttod_maxrule:.1f}%, RRP {rrp_translated:.1f}%/{rrp_maxrule:.1f}%"
    )
    return report


def stage_adversarial(
    config: RunConfig,
    model: baseline.ClassifierModel,
    pairs: dict,
    ss_S: SliceSet,
    manifest: SplitManifest,
) -> MetricsReport:
    """All ordered (target i, source j != i) impersonation rates."""
    from .authmetrics import adversarial_eval

    path = config.out_dir / "metrics" / "metrics_adversarial.json"
    if path.exists():
        doc = _load_json(path)
        if doc.get("extra", {}).get("config_hash") == config.config_hash():
            _say("adversarial: reusing existing metrics")
            return MetricsReport.from_json(path.read_text())
    ev = _eval_subset(config, ss_S, manifest)
    devices = sorted(pairs)
    n = len(devices)
    matrix = np.full((n, n), np.nan)
    rates = []
    for i in devices:
        for j in devices:
            if i == j:
                continue
            rep = adversarial_eval(pairs, model, ev.for_device(j), i)
            matrix[i, j] = rep.ttod_pct
            rates.append(rep.ttod_pct)
    mean_rate = float(np.mean(rates))
    max_rate = float(np.max(rates))
    report = MetricsReport(
        ttod_pct=mean_rate,
        extra={
            "config_hash": config.config_hash(),
            "impersonation_matrix": [[None if np.isnan(v) else v for v in row] for row in matrix],
            "mean_impersonation_pct": mean_rate,
            "max_impersonation_pct": max_rate,
            "chance_pct": 100.0 / n,
        },
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    _say(f"adversarial: impersonation mean {mean_rate:.1f}%, max {max_rate:.1f}%")
    return report


def stage_report(config: RunConfig):
    from .report import render_run_report

    metrics_dir = config.out_dir / "metrics"
    if not (metrics_dir / "metrics_baseline.json").exists():
        raise DataError("no metrics found; run evaluate first")
    for name in (
        "metrics_baseline.json",
        "metrics_translated.json",
        "metrics_adversarial.json",
    ):
        p = metrics_dir / name
        if p.exists():
            _check_hash(_load_json(p).get("extra", {}).get("config_hash"), config, name)
    paths = render_run_report(config)
    _say(f"report: wrote {len(paths)} files under {config.out_dir / 'report'}")
    return paths


# ------------------------------------------------------------------ run-all


def run_all(config: RunConfig):
    """Execute every stage in order; stages resume from saved artifacts."""
    write_resolved_config(config)
    dataset_dir = stage_simulate(config)
    ss_T, ss_S = stage_slice(config, dataset_dir)
    manifest = stage_split(config, ss_T, ss_S)
    model = stage_train_baseline(config, ss_T, manifest)
    base_report = stage_evaluate_baseline(config, model, ss_T, ss_S, manifest)
    pairs = stage_train_reveal(config, model, ss_T, ss_S, manifest)
    if sorted(pairs) != ss_T.device_ids:
        raise LabelMismatch("translator set does not cover every device")
    translated_report = stage_evaluate_translated(config, model, pairs, ss_S, manifest)
    adv_report = stage_adversarial(config, model, pairs, ss_S, manifest)
    stage_report(config)
    return base_report, translated_report, adv_report

"""Artifact-level pipeline stages behind the command-line interface.

Every stage reads its inputs from the output directory, writes its products
there, and stamps each file with the config hash and seed. Stages fail with
MissingArtifactError when an upstream product is absent.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from . import annotator, cohort, corpus, evaluation, explain, forest, plots, seqmodel
from .config import lineage


class MissingArtifactError(FileNotFoundError):
    """An upstream pipeline product is required but absent."""


def _artifact(outdir, name, must_exist=False) -> str:
    path = os.path.join(outdir, name)
    if must_exist and not os.path.exists(path):
        raise MissingArtifactError(f"missing artifact {name}; run the producing stage first")
    return path


def _generator_config(config: dict) -> corpus.GeneratorConfig:
    gen = config["generator"]
    return corpus.GeneratorConfig(
        seed=gen["seed"],
        cohort_sizes=dict(gen["cohort_sizes"]),
        notes_per_patient=tuple(gen["notes_per_patient"]),
        window_days=config["window_days"],
        negated_rate=gen["negated_rate"],
        family_rate=gen["family_rate"],
        suspected_rate=gen["suspected_rate"],
        unruled_rate=gen["unruled_rate"],
        out_of_window_patient_rate=gen["out_of_window_patient_rate"],
        straggler_note_rate=gen["straggler_note_rate"],
        male_fraction=gen["male_fraction"],
        white_fraction=gen["white_fraction"],
    )


def _load_resources(config: dict):
    if config["lexicon"]:
        lexicon = annotator.load_lexicon(config["lexicon"])
    else:
        lexicon = annotator.default_lexicon()
    if config["triggers"]:
        rules = annotator.load_trigger_rules(config["triggers"], config["scope_window"])
    else:
        rules = annotator.default_rules(config["scope_window"])
    return lexicon, rules


def stage_gen(config: dict, outdir: str) -> dict:
    generated = corpus.generate_corpus(_generator_config(config))
    violations = corpus.validate_corpus(generated)
    if violations:
        raise ValueError(f"generated corpus failed validation: {violations[:3]}")
    corpus.save_corpus(generated, _artifact(outdir, "corpus.jsonl"), header=lineage(config))
    return {
        "patients": len(generated.patients),
        "notes": sum(1 for _ in generated.notes()),
        "gold_mentions": len(generated.gold),
    }


def stage_annotate(config: dict, outdir: str) -> dict:
    loaded = corpus.load_corpus(_artifact(outdir, "corpus.jsonl", must_exist=True))
    lexicon, rules = _load_resources(config)

    kept = 0
    with open(_artifact(outdir, "annotations.jsonl"), "w", encoding="utf-8") as handle:
        handle.write(f"# {lineage(config)}\n")
        all_filtered = []
        for note in loaded.notes():
            filtered = annotator.filter_annotations(annotator.annotate(note, lexicon, rules))
            all_filtered.extend(filtered)
            kept += len(filtered)
            handle.write(
                json.dumps(
                    {
                        "note_id": note.note_id,
                        "annotations": [
                            {
                                "concept_id": a.concept_id,
                                "start": a.start,
                                "end": a.end,
                                "surface": a.surface,
                            }
                            for a in filtered
                        ],
                    },
                    sort_keys=True,
                )
                + "\n"
            )

    summary = {"notes": sum(1 for _ in loaded.notes()), "kept_annotations": kept}
    if loaded.gold:
        report = annotator.evaluate_against_gold(
            all_filtered, annotator.gold_to_annotations(loaded.gold)
        )
        payload = {"lineage": lineage(config), **report.as_dict()}
        with open(_artifact(outdir, "gold_eval.json"), "w", encoding="utf-8") as handle:
            json.dump(payload, handle, sort_keys=True, indent=1)
        summary["gold_f1"] = report.f1
    return summary


def _load_annotations(outdir) -> dict:
    annotations_by_note: dict[str, list] = {}
    path = _artifact(outdir, "annotations.jsonl", must_exist=True)
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            record = json.loads(line)
            annotations_by_note[record["note_id"]] = [
                annotator.Annotation(
                    record["note_id"], a["concept_id"], a["start"], a["end"], a["surface"]
                )
                for a in record["annotations"]
            ]
    return annotations_by_note


def stage_build(config: dict, outdir: str) -> dict:
    loaded = corpus.load_corpus(_artifact(outdir, "corpus.jsonl", must_exist=True))
    annotations = _load_annotations(outdir)

    windowed, dropped = cohort.window_notes(loaded, config["window_days"])
    vocabulary, features = cohort.build_features(windowed, annotations, config["min_count"])
    sequences = cohort.build_sequences(windowed, annotations, vocabulary)
    split = cohort.make_splits(
        windowed.patients,
        seed=config["split"]["seed"],
        planned_test=config["split"]["planned_test"],
        ward_test=config["split"]["ward_test"],
    )

    cohort.write_feature_matrix(
        _artifact(outdir, "features.tsv"), vocabulary, features, header=lineage(config)
    )
    with open(_artifact(outdir, "sequences.jsonl"), "w", encoding="utf-8") as handle:
        handle.write(f"# {lineage(config)}\n")
        for seq in sequences:
            handle.write(
                json.dumps(
                    {
                        "patient_id": seq.patient_id,
                        "label": seq.label,
                        "class": seq.class_label,
                        "notes": seq.vectors.tolist(),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    with open(_artifact(outdir, "splits.json"), "w", encoding="utf-8") as handle:
        json.dump(
            {
                "lineage": lineage(config),
                "train": sorted(split.train),
                "test": sorted(split.test),
                "dropped_no_notes_in_window": sorted(dropped),
            },
            handle,
            sort_keys=True,
            indent=1,
        )
    counts = split.counts(windowed.patients)
    return {
        "dropped": len(dropped),
        "vocabulary": len(vocabulary),
        "train": counts["train"],
        "test": counts["test"],
    }


def _load_features(outdir):
    path = _artifact(outdir, "features.tsv", must_exist=True)
    with open(path, encoding="utf-8") as handle:
        lines = [l.rstrip("\n") for l in handle if l.strip() and not l.startswith("#")]
    header = lines[0].split("\t")
    concept_ids = tuple(header[6:])
    vocabulary = cohort.FeatureVocabulary(concept_ids)
    features = []
    for line in lines[1:]:
        cells = line.split("\t")
        features.append(
            cohort.PatientFeatures(
                cells[0],
                np.array([int(c) for c in cells[6:]], dtype=np.int64),
                int(cells[1]),
                cells[2],
                corpus.Demographics(int(cells[3]), cells[4], cells[5]),
            )
        )
    return vocabulary, features


def _load_sequences(outdir):
    path = _artifact(outdir, "sequences.jsonl", must_exist=True)
    sequences = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            record = json.loads(line)
            sequences.append(
                cohort.PatientSequence(
                    record["patient_id"],
                    np.array(record["notes"], dtype=np.int64),
                    record["label"],
                    record["class"],
                )
            )
    return sequences


def _load_split(outdir) -> cohort.SplitAssignment:
    path = _artifact(outdir, "splits.json", must_exist=True)
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    return cohort.SplitAssignment(frozenset(payload["train"]), frozenset(payload["test"]))


def stage_stats(config: dict, outdir: str) -> dict:
    vocabulary, features = _load_features(outdir)
    ward_rows, itu_rows = cohort.concept_ratio_report(vocabulary, features)
    cohort.write_ratio_report(
        _artifact(outdir, "stats_ward_enriched.tsv"), ward_rows, header=lineage(config)
    )
    cohort.write_ratio_report(
        _artifact(outdir, "stats_itu_enriched.tsv"), itu_rows, header=lineage(config)
    )
    return {"ward_enriched": len(ward_rows), "itu_enriched": len(itu_rows)}


def _split_features(outdir):
    vocabulary, features = _load_features(outdir)
    split = _load_split(outdir)
    by_id = {f.patient_id: f for f in features}
    train = [by_id[p] for p in sorted(split.train)]
    test = [by_id[p] for p in sorted(split.test)]
    return vocabulary, train, test


def _selected_features(config, train):
    X_train, y_train = cohort.feature_matrix(train)
    scores = forest.chi2_feature_scores(X_train, y_train)
    return forest.select_k_best(scores, config["k_features"]), scores


def stage_train_rf(config: dict, outdir: str) -> dict:
    vocabulary, train, _ = _split_features(outdir)
    X_train, y_train = cohort.feature_matrix(train)
    selected, scores = _selected_features(config, train)

    with open(_artifact(outdir, "feature_scores.tsv"), "w", encoding="utf-8") as handle:
        handle.write(f"# {lineage(config)}\n")
        handle.write("concept\tscore\tselected\n")
        for j, concept in enumerate(vocabulary.concept_ids):
            handle.write(f"{concept}\t{scores.scores[j]:.6g}\t{int(j in set(selected))}\n")

    fc = config["forest"]
    for run in range(fc["n_runs"]):
        model = forest.fit_forest(
            X_train[:, selected],
            y_train,
            forest.ForestConfig(
                n_trees=fc["n_trees"],
                max_depth=fc["max_depth"],
                min_samples_split=fc["min_samples_split"],
                min_samples_leaf=fc["min_samples_leaf"],
                features_per_split=fc["features_per_split"],
                seed=fc["seed"] + run,
            ),
            selected_features=selected,
        )
        forest.save_model(
            model,
            _artifact(outdir, f"rf_model_{run:03d}.json"),
            header={"lineage": lineage(config)},
        )
    return {"runs": fc["n_runs"], "k_features": len(selected)}


def stage_train_lstm(config: dict, outdir: str) -> dict:
    _, train, _ = _split_features(outdir)
    sequences = _load_sequences(outdir)
    split = _load_split(outdir)
    selected, _ = _selected_features(config, train)

    seq_by_id = {s.patient_id: s for s in sequences}
    train_seqs = [seq_by_id[p] for p in sorted(split.train)]
    stats = seqmodel.fit_encoder(train_seqs, selected)
    encoded = [seqmodel.encode_sequence(s.vectors, stats) for s in train_seqs]
    labels = np.array([s.label for s in train_seqs])

    lc = config["lstm"]
    losses = []
    for run in range(lc["n_runs"]):
        model, log = seqmodel.fit_lstm(
            encoded,
            labels,
            seqmodel.LstmConfig(
                epochs=lc["epochs"],
                hidden_size=lc["hidden_size"],
                batch_size=lc["batch_size"],
                dropout=lc["dropout"],
                learning_rate=lc["learning_rate"],
                seed=lc["seed"] + run,
                precision=lc["precision"],
            ),
            encoder=stats,
        )
        seqmodel.save_model(
            model,
            _artifact(outdir, f"lstm_model_{run:03d}.json"),
            header={"lineage": lineage(config)},
        )
        losses.append(log.epoch_losses[-1])
    return {"runs": lc["n_runs"], "final_losses": [round(l, 4) for l in losses]}


def _load_rf_models(config, outdir):
    models = []
    for run in range(config["forest"]["n_runs"]):
        models.append(forest.load_model(_artifact(outdir, f"rf_model_{run:03d}.json", True)))
    return models


def _load_lstm_models(config, outdir):
    models = []
    for run in range(config["lstm"]["n_runs"]):
        models.append(seqmodel.load_model(_artifact(outdir, f"lstm_model_{run:03d}.json", True)))
    return models


def stage_eval(config: dict, outdir: str) -> dict:
    _, train, test = _split_features(outdir)
    sequences = _load_sequences(outdir)
    split = _load_split(outdir)
    rf_models = _load_rf_models(config, outdir)
    lstm_models = _load_lstm_models(config, outdir)

    X_test, _ = cohort.feature_matrix(test)
    class_labels = np.array([f.class_label for f in test])
    y_test = np.array([f.label for f in test])
    demographics = [f.demographics for f in test]

    seq_by_id = {s.patient_id: s for s in sequences}
    test_seqs = [seq_by_id[f.patient_id] for f in test]

    rf_probs = [forest.predict_proba(m, X_test[:, m.selected_features]) for m in rf_models]
    lstm_probs = [
        seqmodel.predict_proba(
            m, [seqmodel.encode_sequence(s.vectors, m.encoder) for s in test_seqs]
        )
        for m in lstm_models
    ]
    ensemble_probs = evaluation.ensemble_average(
        np.mean(rf_probs, axis=0), np.mean(lstm_probs, axis=0)
    )

    rf_preds = [evaluation.classify(p) for p in rf_probs]
    lstm_preds = [evaluation.classify(p) for p in lstm_probs]
    ensemble_preds = [evaluation.classify(ensemble_probs)]

    resamples, eval_seed = config["eval"]["resamples"], config["eval"]["seed"]
    tables = {
        "RF": evaluation.bootstrap_metrics_table(class_labels, rf_preds, resamples, eval_seed),
        "LSTM": evaluation.bootstrap_metrics_table(
            class_labels, lstm_preds, resamples, eval_seed
        ),
        "Ensemble": evaluation.bootstrap_metrics_table(
            class_labels, ensemble_preds, resamples, eval_seed
        ),
    }
    evaluation.write_metrics_table(
        _artifact(outdir, "report.tsv"),
        tables,
        footer_lines=[evaluation.SUBTYPE_PRECISION_NOTE],
        header=lineage(config),
    )

    curves = {
        "RF": evaluation.calibration_curve(
            y_test, np.mean(rf_probs, axis=0), config["eval"]["n_bins"]
        ),
        "LSTM": evaluation.calibration_curve(
            y_test, np.mean(lstm_probs, axis=0), config["eval"]["n_bins"]
        ),
        "Ensemble": evaluation.calibration_curve(
            y_test, ensemble_probs, config["eval"]["n_bins"]
        ),
    }
    with open(_artifact(outdir, "calibration.tsv"), "w", encoding="utf-8") as handle:
        handle.write(f"# {lineage(config)}\n")
        handle.write("model\tmean_predicted\tobserved_rate\tcount\n")
        for name, curve in curves.items():
            for mean_pred, observed, count in curve.bins:
                handle.write(f"{name}\t{mean_pred:.6g}\t{observed:.6g}\t{count}\n")

    # Fairness parity for the winning model (seed-0 RF predictions).
    parity = evaluation.demographic_parity(class_labels, rf_preds[0], demographics)
    with open(_artifact(outdir, "parity.tsv"), "w", encoding="utf-8") as handle:
        handle.write(f"# {lineage(config)}\n")
        handle.write("comparison\tgroup\tprecision\trecall\tf1\tfn_ratio\n")
        for comparison, groups in parity.ratios.items():
            for group, metrics in groups.items():
                cells = [comparison, group] + [
                    evaluation.format_value(metrics[m]) for m in ("precision", "recall", "f1", "fn_ratio")
                ]
                handle.write("\t".join(cells) + "\n")

    n_unplanned = int((class_labels == "UnplannedITU").sum())
    n_planned = int((class_labels == "PlannedITU").sum())
    unplanned_mask = class_labels == "UnplannedITU"
    fn_unplanned = float(
        np.mean([1.0 - p[unplanned_mask].mean() for p in rf_preds])
    )
    missed = evaluation.missed_unplanned_reduction(n_unplanned, n_planned, fn_unplanned)
    with open(_artifact(outdir, "missed_unplanned.tsv"), "w", encoding="utf-8") as handle:
        handle.write(f"# {lineage(config)}\n")
        handle.write("n_unplanned\tn_planned\tfn_unplanned\tbaseline_missed\tresidual_missed\n")
        handle.write(
            f"{n_unplanned}\t{n_planned}\t{fn_unplanned:.6g}"
            f"\t{missed.baseline:.6g}\t{missed.residual:.6g}\n"
        )

    itu_row = tables["RF"]["ITU"]
    return {
        "rf_itu": None if itu_row is None else {k: round(v[0], 3) for k, v in itu_row.items() if v},
        "missed_baseline": round(missed.baseline, 4),
        "missed_residual": round(missed.residual, 4),
    }


def stage_explain(config: dict, outdir: str) -> dict:
    vocabulary, train, test = _split_features(outdir)
    rf_model = _load_rf_models(config, outdir)[0]
    selected = rf_model.selected_features
    names = [vocabulary.concept_ids[j] for j in selected]

    X_train, _ = cohort.feature_matrix(train)
    X_test, _ = cohort.feature_matrix(test)
    ec = config["explain"]
    background = explain.make_background(X_train[:, selected], ec["background_cap"], ec["seed"])

    # Global picture over a seeded sample of training patients.
    rng = np.random.default_rng(ec["seed"])
    sample_idx = rng.choice(len(X_train), size=min(ec["n_samples"], len(X_train)), replace=False)
    attributions = []
    for i in sample_idx:
        attributions.append(
            explain.shapley_values(
                rf_model,
                X_train[i, selected],
                background,
                method="sampled",
                n_permutations=ec["n_permutations"],
                seed=ec["seed"] + int(i),
            )
        )
    summary = explain.global_summary(attributions, X_train[np.ix_(sample_idx, selected)])

    with open(_artifact(outdir, "shap_summary.tsv"), "w", encoding="utf-8") as handle:
        handle.write(f"# {lineage(config)}\n")
        handle.write("rank\tconcept\tmean_abs_phi\n")
        for rank, j in enumerate(summary.order, start=1):
            handle.write(f"{rank}\t{names[j]}\t{summary.mean_abs[j]:.6g}\n")
    with open(_artifact(outdir, "shap_points.tsv"), "w", encoding="utf-8") as handle:
        handle.write(f"# {lineage(config)}\n")
        handle.write("concept\tfeature_value\tphi\n")
        for j in summary.order:
            for value, phi in summary.points[j]:
                handle.write(f"{names[j]}\t{value:.6g}\t{phi:.6g}\n")

    # Local explanation: the first unplanned test case the model catches.
    chosen = None
    for f in test:
        if f.class_label != "UnplannedITU":
            continue
        if forest.predict(rf_model, f.counts[selected]) == 1:
            chosen = f
            break
    lime_payload = {"patient": None}
    if chosen is not None:
        lime = explain.lime_explain(
            rf_model,
            chosen.counts[selected].astype(float),
            explain.LimeConfig(n_perturbations=ec["lime_perturbations"], seed=ec["seed"]),
        )
        with open(_artifact(outdir, "lime_explanation.tsv"), "w", encoding="utf-8") as handle:
            handle.write(f"# {lineage(config)}\n")
            handle.write(f"# patient={chosen.patient_id} class={chosen.class_label}\n")
            handle.write("concept\tcoefficient\timportance\n")
            for j in np.argsort(-lime.importances):
                handle.write(
                    f"{names[j]}\t{lime.coefficients[j]:.6g}\t{lime.importances[j]:.6g}\n"
                )
        lime_payload = {"patient": chosen.patient_id, "r2": round(lime.r2, 4)}
    return {"shap_samples": len(attributions), "lime": lime_payload}


def _read_tsv(path, skip_comments=True):
    with open(path, encoding="utf-8") as handle:
        rows = [
            line.rstrip("\n").split("\t")
            for line in handle
            if line.strip() and not (skip_comments and line.startswith("#"))
        ]
    return rows[0], rows[1:]


def stage_report(config: dict, outdir: str) -> dict:
    stamp = lineage(config)
    produced = []

    header, rows = _read_tsv(_artifact(outdir, "calibration.tsv", must_exist=True))
    curves: dict[str, list] = {}
    for model_name, mean_pred, observed, count in rows:
        curves.setdefault(model_name, []).append((float(mean_pred), float(observed), int(count)))
    curve_objs = {
        name: evaluation.CalibrationCurve(bins, config["eval"]["n_bins"])
        for name, bins in curves.items()
    }
    path = _artifact(outdir, "calibration.svg")
    plots.plot_calibration(curve_objs, path, stamp)
    produced.append(path)

    header, rows = _read_tsv(_artifact(outdir, "feature_scores.tsv", must_exist=True))
    chosen = [(r[0], float(r[1])) for r in rows if r[2] == "1"]
    chosen.sort(key=lambda item: -item[1])
    path = _artifact(outdir, "chi2_topk.svg")
    plots.plot_chi2_bars([c for c, _ in chosen], [s for _, s in chosen], path, stamp)
    produced.append(path)

    header, rows = _read_tsv(_artifact(outdir, "shap_points.tsv", must_exist=True))
    grouped: dict[str, list] = {}
    for concept, value, phi in rows:
        grouped.setdefault(concept, []).append((float(value), float(phi)))
    ranking_header, ranking_rows = _read_tsv(_artifact(outdir, "shap_summary.tsv", must_exist=True))
    ordered_names = [r[1] for r in ranking_rows]
    summary = explain.GlobalShapSummary(
        order=np.arange(len(ordered_names)),
        mean_abs=np.array([float(r[2]) for r in ranking_rows]),
        points=[np.array(grouped.get(name, np.empty((0, 2)))) for name in ordered_names],
    )
    path = _artifact(outdir, "shap_beeswarm.svg")
    plots.plot_shap_beeswarm(summary, ordered_names, path, stamp)
    produced.append(path)

    lime_path = _artifact(outdir, "lime_explanation.tsv")
    path = _artifact(outdir, "lime.svg")
    if os.path.exists(lime_path):
        header, rows = _read_tsv(lime_path)
        plots.plot_lime_bars(
            [r[0] for r in rows],
            [float(r[1]) for r in rows],
            path,
            stamp,
            title="Local explanation (flagged unplanned admission)",
        )
    else:
        plots.plot_lime_bars([], [], path, stamp)
    produced.append(path)
    return {"plots": [os.path.basename(p) for p in produced]}


STAGES = {
    "gen": stage_gen,
    "annotate": stage_annotate,
    "build": stage_build,
    "stats": stage_stats,
    "train-rf": stage_train_rf,
    "train-lstm": stage_train_lstm,
    "eval": stage_eval,
    "explain": stage_explain,
    "report": stage_report,
}


def run_stage(name: str, config: dict, outdir: str) -> dict:
    os.makedirs(outdir, exist_ok=True)
    return STAGES[name](config, outdir)

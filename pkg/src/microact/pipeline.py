"""File-based pipeline stages.

Each stage is a plain function (proc_dir, config) -> summary dict that
reads and writes the documented files inside one procedure directory, so
chaining stages individually is byte-identical to `run_all` and users
can swap in real detector output at any handoff point.  No stage writes
timestamps or machine-dependent values; all randomness flows from the
config seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .clustering import (Segment, boundaries_to_segments, frame_clusters,
                         align_clusters, kmeans, segment_features,
                         semantic_label)
from .config import SCHEMA_VERSION, PipelineConfig
from .kinematics import KinematicFeatureExtractor
from .metrics import boundary_metrics, frame_metrics
from .records import (ActionClass, InstrumentClass, Provenance,
                      SkillLevel, TipTrajectory)
from .segmentation import NoveltyBoundaryDetector, enhance, ssm
from .skill import (SkillGradientBoosting, cross_validate, discretize_score,
                    predict as skill_predict, skill_feature_vector)
from .synth import (SLOPPINESS_BY_LEVEL, generate, paper_shaped_script,
                    write_procedure)
from .tracking import (InstrumentTracker, iou, localize_tip, refine_identity,
                       recovery_correction_rates)

FILES = {
    "meta": "meta.json",
    "detections": "detections.jsonl",
    "truth": "truth.jsonl",
    "tips_truth": "tips_truth.csv",
    "labels": "labels.csv",
    "boundaries_truth": "boundaries_truth.csv",
    "candidates": "tip_candidates.jsonl",
    "references": "reference_descriptors.json",
    "scores": "scores.csv",
    "track_rows": "track_rows.jsonl",
    "refined": "refined_tracks.jsonl",
    "tips": "tips.csv",
    "tips_classes": "tips_classes.json",
    "features": "features.csv",
    "presence": "presence.csv",
    "novelty": "novelty.csv",
    "boundaries": "boundaries.csv",
    "segments": "segments.csv",
    "pred_labels": "predicted_labels.csv",
    "eval": "eval.json",
    "skill_pred": "skill_predictions.json",
    "report_txt": "report.txt",
    "report_json": "report.json",
}

# which stage produces each file, for missing-input diagnostics
PRODUCER = {
    "meta": "synth",
    "detections": "synth",
    "truth": "synth",
    "labels": "synth",
    "boundaries_truth": "synth",
    "candidates": "synth",
    "references": "synth",
    "scores": "synth",
    "track_rows": "track",
    "refined": "track",
    "tips": "tips",
    "tips_classes": "tips",
    "features": "features",
    "presence": "features",
    "novelty": "segment",
    "boundaries": "segment",
    "segments": "cluster",
    "pred_labels": "cluster",
    "eval": "eval",
    "skill_pred": "predict-skill",
}

# action types that receive expert scores; skill training and prediction
# are restricted to segments of these classes
RATED_ACTIONS = (ActionClass.NEEDLE_DRIVING, ActionClass.KNOT_TYING)


class MissingInput(FileNotFoundError):
    def __init__(self, path, key: str):
        producer = PRODUCER.get(key, "an upstream")
        super().__init__(
            f"missing {path}; run the '{producer}' stage first "
            "(or supply the file)")
        self.path = str(path)
        self.stage = producer


def _path(proc_dir, key: str) -> Path:
    return Path(proc_dir) / FILES[key]


def _require(proc_dir, key: str) -> Path:
    p = _path(proc_dir, key)
    if not p.exists():
        raise MissingInput(p, key)
    return p


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _load_meta(proc_dir) -> dict:
    with open(_require(proc_dir, "meta"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    for key in ("fps", "n_frames"):
        if key not in meta:
            raise ValueError(f"{_path(proc_dir, 'meta')}: missing {key!r}")
    return meta


# ---------------------------------------------------------------------------
# stages


def stage_synth(out_dir, cfg: PipelineConfig,
                level: Optional[SkillLevel] = None) -> dict:
    """Generate one synthetic procedure directory, ground truth included."""
    s = cfg.synth
    sloppiness = SLOPPINESS_BY_LEVEL[level] if level is not None else s.sloppiness
    script = paper_shaped_script(
        fps=s.fps, seed=cfg.seed, noise=s.noise,
        dropout_rate=s.dropout_rate, mislabel_rate=s.mislabel_rate,
        sloppiness=sloppiness)
    if s.dropout_max_run != script.dropout_max_run:
        script = replace(script, dropout_max_run=s.dropout_max_run)
    proc = generate(script)
    write_procedure(proc, out_dir)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "procedure_id": f"synth-{cfg.seed:06d}",
        "fps": proc.fps,
        "n_frames": proc.n_frames,
        "seed": cfg.seed,
    }
    _write_json(meta, _path(out_dir, "meta"))
    return {"n_frames": proc.n_frames, "n_detections": len(proc.detections),
            "procedure_id": meta["procedure_id"]}


def stage_track(proc_dir, cfg: PipelineConfig) -> dict:
    """Detections -> per-frame track rows -> identity-repaired tracks."""
    meta = _load_meta(proc_dir)
    detections = io.load_detections(_require(proc_dir, "detections"))
    t = cfg.tracking
    tracker = InstrumentTracker(
        iou_weight=t.iou_weight, appearance_weight=t.appearance_weight,
        iou_gate=t.iou_gate, max_coast=t.max_coast,
        delete_after=t.delete_after, confirm_hits=t.confirm_hits,
        cross_class_iou=t.cross_class_iou)
    rows = tracker.run(detections, first_frame=0,
                       last_frame=int(meta["n_frames"]) - 1)
    io.save_track_rows(rows, _path(proc_dir, "track_rows"))
    # objects that never reach confirm_hits detections are detector noise
    # (typically a mislabeled frame rejected by the cross-class gate);
    # repairing identities across them would graft the noise onto real
    # objects, so they are dropped before the repair pass
    backed: dict[int, int] = {}
    for r in rows:
        if r.det_index is not None:
            backed[r.object_id] = backed.get(r.object_id, 0) + 1
    confirmed = [r for r in rows
                 if backed.get(r.object_id, 0) >= t.confirm_hits]
    refined = refine_identity(confirmed, max_gap=t.max_gap)
    io.save_refined_tracks(refined, _path(proc_dir, "refined"))
    report = io.validate_stream(detections)
    return {"n_rows": len(rows), "n_objects": len(refined),
            "detection_gaps": len(report.gaps),
            "detection_anomalies": len(report.anomalies)}


def _candidate_sets_by_frame(candidates) -> dict[int, list]:
    by_frame: dict[int, list] = {}
    for (frame, slot), cset in sorted(candidates.items()):
        by_frame.setdefault(frame, []).append(cset)
    return by_frame


def _confirmed_frames(track, min_hits: int = 1) -> list[int]:
    """Track frames minus trailing coasted rows and unconfirmed tracks.

    A coasted box between two of the track's own detections bridges a
    dropout; a coasted run the track never confirms again (its own
    departure, or a lost lock while the real instrument re-entered as a
    new track) is the tracker guessing forward, and those guesses drift.
    Trim each contiguous run back to its last detection-backed frame.
    Tracks with fewer than ``min_hits`` detection-backed frames in total
    are detector noise and contribute nothing.
    """
    frames = track.frames()
    n_backed = sum(1 for f in frames
                   if track.provenance[f] != Provenance.RECOVERED)
    if n_backed < min_hits:
        return []
    out = []
    i = 0
    while i < len(frames):
        j = i
        while j + 1 < len(frames) and frames[j + 1] == frames[j] + 1:
            j += 1
        run = frames[i: j + 1]
        backed = [f for f in run
                  if track.provenance[f] != Provenance.RECOVERED]
        if backed:
            out += [f for f in run if f <= backed[-1]]
        i = j + 1
    return out


def stage_tips(proc_dir, cfg: PipelineConfig) -> dict:
    """Refined tracks -> one tip trajectory per instrument class.

    Tracks fold into class slots because an instrument that leaves the
    field for a whole action and returns is a new track id by design;
    the kinematic features want the continuing "scissors" or "needle
    driver" role.  Slot ids are the class positions in InstrumentClass
    order, so the feature layout is stable across procedures.

    When a candidate file and reference descriptors exist, candidates are
    matched to track boxes geometrically (tracker ids need not agree with
    the candidate producer's ids) and the best-cosine candidate becomes
    the tip.  Frames without a usable candidate set fall back to the box
    center, which is also the whole story for coasted boxes.
    """
    meta = _load_meta(proc_dir)
    n_frames = int(meta["n_frames"])
    refined = io.load_refined_tracks(_require(proc_dir, "refined"))

    cand_path = _path(proc_dir, "candidates")
    ref_path = _path(proc_dir, "references")
    by_frame: dict[int, list] = {}
    references: dict[InstrumentClass, np.ndarray] = {}
    if cand_path.exists() and ref_path.exists():
        by_frame = _candidate_sets_by_frame(io.load_tip_candidates(cand_path))
        references = io.load_reference_descriptors(ref_path)

    # best[(class, frame)] = (rank, object_id, tip); detection-backed rows
    # outrank recovered ones, then the older object wins
    best_tip: dict[tuple[InstrumentClass, int],
                   tuple[int, int, tuple[float, float]]] = {}
    n_localized = 0
    for track in sorted(refined, key=lambda t: t.object_id):
        ref = references.get(track.class_id)
        for f in _confirmed_frames(track, cfg.tracking.confirm_hits):
            if not 0 <= f < n_frames:
                continue
            box = track.boxes[f]
            tip = None
            if ref is not None:
                cand, cand_iou = None, 0.0
                for cset in by_frame.get(f, ()):
                    if cset.bbox is None:
                        continue
                    v = iou(box, cset.bbox)
                    if v > cand_iou:
                        cand, cand_iou = cset, v
                # det-backed rows carry the detection box verbatim, so the
                # right candidate set matches at IoU 1; 0.5 rejects overlap
                # with a neighboring instrument's crop
                if cand is not None and cand_iou >= 0.5:
                    tip = localize_tip(cand.candidates, ref, bbox=cand.bbox)
                    n_localized += 1
            if tip is None:
                x, y, w, h = box
                tip = (x + w / 2.0, y + h / 2.0)
            rank = 1 if track.provenance[f] == Provenance.RECOVERED else 0
            key = (track.class_id, f)
            entry = (rank, track.object_id, tip)
            if key not in best_tip or entry < best_tip[key]:
                best_tip[key] = entry

    classes = sorted({c for c, _ in best_tip},
                     key=list(InstrumentClass).index)
    trajectories = []
    for cls in classes:
        points: list[Optional[tuple[float, float]]] = [None] * n_frames
        for f in range(n_frames):
            entry = best_tip.get((cls, f))
            if entry is not None:
                points[f] = entry[2]
        trajectories.append(TipTrajectory(
            instrument_id=list(InstrumentClass).index(cls), points=points,
            fps=float(meta["fps"]), class_id=cls))

    io.save_tips(trajectories, _path(proc_dir, "tips"))
    _write_json({str(tr.instrument_id): tr.class_id.value for tr in trajectories},
                _path(proc_dir, "tips_classes"))
    return {"n_trajectories": len(trajectories), "n_localized": n_localized}


def stage_features(proc_dir, cfg: PipelineConfig) -> dict:
    """Tip trajectories -> kinematic feature matrix + presence matrix."""
    meta = _load_meta(proc_dir)
    with open(_require(proc_dir, "tips_classes"), "r", encoding="utf-8") as fh:
        class_map = {int(k): InstrumentClass(v)
                     for k, v in json.load(fh).items()}
    trajectories = io.load_tips(_require(proc_dir, "tips"),
                                fps=float(meta["fps"]), class_map=class_map)
    f = cfg.features
    extractor = KinematicFeatureExtractor(
        downsample=f.downsample, smooth_window=f.smooth_window,
        zscore=f.zscore)
    km = extractor.transform(trajectories)
    sidecar = {
        "native_fps": float(meta["fps"]),
        "effective_fps": km.fps,
        "downsample": f.downsample,
        "n_frames_native": int(meta["n_frames"]),
        "instrument_ids": km.instrument_ids,
        "mask_classes": [class_map[i].value if i in class_map else None
                         for i in km.instrument_ids],
    }
    io.save_matrix(km.X, km.feature_names, _path(proc_dir, "features"),
                   meta=sidecar)
    io.save_matrix(km.presence_mask,
                   [f"present_{i}" for i in km.instrument_ids],
                   _path(proc_dir, "presence"))
    return {"shape": list(km.X.shape), "effective_fps": km.fps}


def stage_segment(proc_dir, cfg: PipelineConfig) -> dict:
    """Feature matrix -> novelty curve -> boundary frames."""
    X, _, _ = io.load_matrix(_require(proc_dir, "features"))
    g = cfg.segmentation
    det = NoveltyBoundaryDetector(
        half_width=g.half_width, sigma=g.sigma,
        prominence_frac=g.prominence_frac, min_distance=g.min_distance,
        novelty_floor=g.novelty_floor)
    det.fit(X)
    io.save_novelty(det.novelty_, _path(proc_dir, "novelty"))
    io.save_boundaries(det.boundaries_, det.prominences_,
                       _path(proc_dir, "boundaries"))
    return {"n_boundaries": int(len(det.boundaries_))}


def stage_cluster(proc_dir, cfg: PipelineConfig) -> dict:
    """Boundaries -> segments -> K-means -> action-labeled segments.

    With K = 4 and known instrument classes the clusters get semantic
    action names from their centroid presence patterns; otherwise the
    action column falls back to the cluster id and only the optimal
    alignment in `eval` can name frames.
    """
    X, _, sidecar = io.load_matrix(_require(proc_dir, "features"))
    mask, _, _ = io.load_matrix(_require(proc_dir, "presence"))
    taus, _ = io.load_boundaries(_require(proc_dir, "boundaries"))
    if sidecar is None:
        raise MissingInput(str(_path(proc_dir, "features")) + ".meta.json",
                           "features")
    eff_fps = float(sidecar["effective_fps"])
    c = cfg.clustering
    segments = boundaries_to_segments(taus, X.shape[0], eff_fps)
    F = segment_features(X, mask, segments, mask_weight=c.mask_weight)
    model = kmeans(F, c.n_clusters, seed=cfg.seed, restarts=c.restarts,
                   max_iter=c.max_iter)

    mask_classes = [InstrumentClass(v) if v else None
                    for v in sidecar.get("mask_classes", [])]
    mapping: Optional[dict[int, ActionClass]] = None
    flags: list[str] = []
    if c.n_clusters == 4 and mask_classes and all(mask_classes):
        mapping, flags = semantic_label(model.centroids, X.shape[1],
                                        mask_classes)

    rows = []
    for seg, k in zip(segments, model.assignments):
        action = mapping[int(k)].value if mapping else str(int(k))
        rows.append({"index": seg.index, "start_frame": seg.start,
                     "end_frame": seg.end, "cluster": int(k),
                     "action": action, "duration_s": seg.duration_s})
    io.save_segments(rows, _path(proc_dir, "segments"))

    pred_path = _path(proc_dir, "pred_labels")
    if mapping:
        stream = frame_clusters(segments, model.assignments, X.shape[0])
        labels = [mapping[int(k)] for k in stream]
        native = _expand_to_native(labels, int(sidecar["downsample"]),
                                   int(sidecar["n_frames_native"]))
        io.save_labels(native, pred_path)
    elif pred_path.exists():
        pred_path.unlink()  # an older semantic run must not feed eval
    return {"n_segments": len(segments), "inertia": model.inertia,
            "semantic": mapping is not None, "tie_flags": flags}


def _expand_to_native(labels: Sequence, factor: int, n_native: int) -> list:
    """Undo feature downsampling by repetition; frame t maps to t // factor."""
    out = [labels[min(t // factor, len(labels) - 1)] for t in range(n_native)]
    return out


def stage_eval(proc_dir, cfg: PipelineConfig) -> dict:
    """Score predictions against the directory's ground truth."""
    meta = _load_meta(proc_dir)
    native_fps = float(meta["fps"])
    gt_labels = io.load_labels(_require(proc_dir, "labels"))
    _, _, sidecar = io.load_matrix(_require(proc_dir, "features"))
    factor = int(sidecar["downsample"]) if sidecar else 1
    n_native = len(gt_labels)

    result: dict = {"procedure_id": meta.get("procedure_id")}

    segs = io.load_segments(_require(proc_dir, "segments"))
    cluster_stream = []
    for s in segs:
        cluster_stream += [s["cluster"]] * (s["end_frame"] - s["start_frame"])
    cluster_native = _expand_to_native(cluster_stream, factor, n_native)
    _, aligned = align_clusters(cluster_native, gt_labels)
    result["frame_aligned"] = frame_metrics(aligned, gt_labels).to_dict()

    pred_path = _path(proc_dir, "pred_labels")
    if pred_path.exists():
        pred = io.load_labels(pred_path)
        if len(pred) != len(gt_labels):
            raise ValueError(
                f"predicted labels cover {len(pred)} frames, truth "
                f"{len(gt_labels)}")
        result["frame"] = frame_metrics(pred, gt_labels).to_dict()

    taus, _ = io.load_boundaries(_require(proc_dir, "boundaries"))
    gt_taus, _ = io.load_boundaries(_require(proc_dir, "boundaries_truth"))
    tol = int(round(cfg.evaluation.boundary_tolerance_s * native_fps))
    taus_native = [t * factor for t in taus]
    result["boundary"] = boundary_metrics(taus_native, gt_taus, tol).to_dict()

    truth_path = _path(proc_dir, "truth")
    if truth_path.exists() and _path(proc_dir, "refined").exists():
        dets = io.load_detections(_require(proc_dir, "detections"))
        refined = io.load_refined_tracks(_path(proc_dir, "refined"))
        truth = io.load_truth_instances(truth_path)
        rr, cr = recovery_correction_rates(dets, refined, truth,
                                           iou_threshold=cfg.tracking.iou_gate)
        result["tracking"] = {"recovery_rate": rr, "correction_rate": cr}

    _write_json(result, _path(proc_dir, "eval"))
    return result


# ---------------------------------------------------------------------------
# skill stages (train across directories, predict per directory)


def _skill_rows(proc_dir, cfg: PipelineConfig
                ) -> list[tuple[int, ActionClass, int, np.ndarray]]:
    """(segment index, action, repetition ordinal, feature vector) per
    rated-action segment, in segment order."""
    X, _, _ = io.load_matrix(_require(proc_dir, "features"))
    mask, _, _ = io.load_matrix(_require(proc_dir, "presence"))
    seg_rows = io.load_segments(_require(proc_dir, "segments"))
    segments = [Segment(index=s["index"], start=s["start_frame"],
                        end=s["end_frame"], duration_s=s["duration_s"])
                for s in seg_rows]
    F = segment_features(X, mask, segments,
                         mask_weight=cfg.clustering.mask_weight)
    rows = []
    reps = {a: 0 for a in RATED_ACTIONS}
    for s, f in zip(seg_rows, F):
        try:
            action = ActionClass(s["action"])
        except ValueError:
            continue  # cluster-id placeholder; no semantic name assigned
        if action not in RATED_ACTIONS:
            continue
        reps[action] += 1
        vec = skill_feature_vector(f, action, reps[action], s["duration_s"])
        rows.append((s["index"], action, reps[action], vec))
    return rows


def train_skill(proc_dirs: Sequence, cfg: PipelineConfig, model_path,
                summary_path=None) -> dict:
    """Fit the skill booster on every scored rated-action segment."""
    X_rows, y, counts = [], [], {}
    for proc_dir in proc_dirs:
        scores = io.load_scores(_require(proc_dir, "scores"))
        by_action = {s.action_type: s.score for s in scores}
        for _, action, _, vec in _skill_rows(proc_dir, cfg):
            if action not in by_action:
                continue
            level = discretize_score(
                by_action[action],
                thresholds=(cfg.skill.poor_max, cfg.skill.moderate_max))
            X_rows.append(vec)
            y.append(int(level))
            counts[str(level)] = counts.get(str(level), 0) + 1
    if not X_rows:
        raise ValueError("no scored rated-action segments found; run the "
                         "'cluster' stage and check scores.csv")
    widths = {v.shape[0] for v in X_rows}
    if len(widths) > 1:
        raise ValueError(f"feature widths differ across procedures: "
                         f"{sorted(widths)}; use one config for all")
    X = np.vstack(X_rows)
    y_arr = np.asarray(y)
    k = cfg.skill
    model = SkillGradientBoosting(
        n_estimators=k.n_estimators, learning_rate=k.learning_rate,
        max_depth=k.max_depth, random_state=cfg.seed)
    model.fit(X, y_arr)
    model.save(model_path)

    summary = {"n_rows": len(y), "n_procedures": len(proc_dirs),
               "class_counts": counts, "n_features": int(X.shape[1])}
    n_classes = len(set(y))
    if n_classes >= 2 and len(y) >= k.folds:
        cv = cross_validate(X, y_arr, folds=k.folds, seed=cfg.seed,
                            n_estimators=k.n_estimators,
                            learning_rate=k.learning_rate,
                            max_depth=k.max_depth)
        summary["cv"] = {key: val for key, val in cv.items()
                         if key in ("fold_accuracy", "accuracy", "per_class")}
    else:
        summary["cv"] = None
        summary["cv_skipped"] = (f"{n_classes} class(es), {len(y)} rows; "
                                 f"need >= 2 classes and >= {k.folds} rows")
    if summary_path is not None:
        _write_json(summary, summary_path)
    return summary


def predict_skill(proc_dir, cfg: PipelineConfig, model_path) -> dict:
    """Grade each rated-action segment and summarize per action type."""
    model_path = Path(model_path)
    if not model_path.exists():
        raise FileNotFoundError(
            f"missing model {model_path}; run 'train-skill' first")
    model = SkillGradientBoosting.load(model_path)
    per_segment = []
    by_action: dict[str, list[int]] = {}
    for index, action, rep, vec in _skill_rows(proc_dir, cfg):
        level, proba = skill_predict(model, vec)
        per_segment.append({
            "segment_index": index,
            "action": action.value,
            "repetition": rep,
            "level": str(level),
            "proba": {str(SkillLevel(c)): float(p)
                      for c, p in zip(model.classes_, proba)},
        })
        by_action.setdefault(action.value, []).append(int(level))
    summary = {}
    for action, levels in sorted(by_action.items()):
        # majority grade; ties resolve to the worse grade
        votes = sorted(((levels.count(v), -v) for v in set(levels)),
                       reverse=True)
        summary[action] = {"level": str(SkillLevel(-votes[0][1])),
                           "n_segments": len(levels)}
    out = {"segments": per_segment, "summary": summary}
    _write_json(out, _path(proc_dir, "skill_pred"))
    return out


# ---------------------------------------------------------------------------
# report


def _ssm_preview(X: np.ndarray, max_side: int = 256) -> dict:
    stride = max(1, math.ceil(X.shape[0] / max_side))
    S = ssm(X[::stride])
    enhance(S, inplace=True)
    return {"stride": stride,
            "values": [[round(float(v), 4) for v in row] for row in S]}


def _fmt_ratio(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def stage_report(proc_dir, cfg: PipelineConfig) -> dict:
    """Human-readable summary tables plus plot-ready curves.

    report.txt carries the tracking-repair, segmentation-quality and
    skill tables; report.json carries the novelty curve, boundaries,
    label ribbons and a decimated enhanced SSM for plotting.
    """
    meta = _load_meta(proc_dir)
    novelty = io.load_novelty(_require(proc_dir, "novelty"))
    taus, proms = io.load_boundaries(_require(proc_dir, "boundaries"))
    segs = io.load_segments(_require(proc_dir, "segments"))
    X, _, sidecar = io.load_matrix(_require(proc_dir, "features"))

    eval_result = None
    if _path(proc_dir, "eval").exists():
        with open(_path(proc_dir, "eval"), "r", encoding="utf-8") as fh:
            eval_result = json.load(fh)
    skill = None
    if _path(proc_dir, "skill_pred").exists():
        with open(_path(proc_dir, "skill_pred"), "r", encoding="utf-8") as fh:
            skill = json.load(fh)
    pred_ribbon = None
    if _path(proc_dir, "pred_labels").exists():
        pred_ribbon = [a.value for a in
                       io.load_labels(_path(proc_dir, "pred_labels"))]
    truth_ribbon = None
    if _path(proc_dir, "labels").exists():
        truth_ribbon = [a.value for a in
                        io.load_labels(_path(proc_dir, "labels"))]

    lines = []
    push = lines.append
    push("microanastomosis segmentation report")
    push(f"procedure : {meta.get('procedure_id', '?')}")
    push(f"frames    : {meta['n_frames']} @ {meta['fps']} fps")
    push("")

    if eval_result and "tracking" in eval_result:
        tr = eval_result["tracking"]
        push("[tracking repair]")
        push(f"  recovery rate   : {_fmt_ratio(tr['recovery_rate'])}")
        push(f"  correction rate : {_fmt_ratio(tr['correction_rate'])}")
        push("")

    if eval_result:
        fm = eval_result.get("frame") or eval_result.get("frame_aligned")
        tag = "semantic" if "frame" in eval_result else "aligned"
        push(f"[action segmentation vs truth ({tag})]")
        push(f"  frame accuracy  : {fm['accuracy']:.3f}")
        push(f"  macro F1        : {fm['f1']:.3f}")
        push(f"  macro Jaccard   : {fm['jaccard']:.3f}")
        bm = eval_result["boundary"]
        push(f"  boundaries      : P {_fmt_ratio(bm['precision'])} "
             f"R {_fmt_ratio(bm['recall'])} F1 {_fmt_ratio(bm['f1'])} "
             f"(tol {bm['tolerance']} frames)")
        push("  per class:")
        for cls, d in fm["per_class"].items():
            push(f"    {cls:<14} P {d['precision']:.3f} R {d['recall']:.3f} "
                 f"F1 {d['f1']:.3f} J {d['jaccard']:.3f} n {d['support']}")
        push("")

    push(f"[segments] ({len(segs)} segments, {len(taus)} boundaries)")
    push("  idx  start    end      cluster  action         dur_s")
    for s in segs:
        push(f"  {s['index']:<4} {s['start_frame']:<8} {s['end_frame']:<8} "
             f"{s['cluster']:<8} {s['action']:<14} {s['duration_s']:.2f}")
    push("")

    if skill:
        push("[skill grades]")
        for action, d in sorted(skill["summary"].items()):
            push(f"  {action:<14}: {d['level']} "
                 f"over {d['n_segments']} repetitions")
        push("")

    with open(_path(proc_dir, "report_txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    downsample = int(sidecar["downsample"]) if sidecar else 1
    report = {
        "procedure_id": meta.get("procedure_id"),
        "fps": meta["fps"],
        "feature_downsample": downsample,
        "novelty": [round(float(v), 6) for v in novelty],
        "boundaries": [int(t) for t in taus],
        "prominences": [round(float(p), 6) for p in proms],
        "segments": segs,
        "ribbons": {"predicted": pred_ribbon, "truth": truth_ribbon},
        "ssm_preview": _ssm_preview(X),
        "metrics": eval_result,
        "skill": skill,
    }
    _write_json(report, _path(proc_dir, "report_json"))
    return {"report_txt": str(_path(proc_dir, "report_txt")),
            "report_json": str(_path(proc_dir, "report_json"))}


# ---------------------------------------------------------------------------
# chaining


def run_all(proc_dir, cfg: PipelineConfig, model_path=None) -> dict:
    """track -> tips -> features -> segment -> cluster [-> eval]
    [-> predict-skill] -> report, equivalent to running each stage."""
    out = {"track": stage_track(proc_dir, cfg),
           "tips": stage_tips(proc_dir, cfg),
           "features": stage_features(proc_dir, cfg),
           "segment": stage_segment(proc_dir, cfg),
           "cluster": stage_cluster(proc_dir, cfg)}
    if _path(proc_dir, "labels").exists():
        out["eval"] = stage_eval(proc_dir, cfg)
    if model_path is not None:
        out["predict_skill"] = predict_skill(proc_dir, cfg, model_path)
    out["report"] = stage_report(proc_dir, cfg)
    return out

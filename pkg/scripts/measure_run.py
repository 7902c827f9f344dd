"""Measure a finished desk run (the acceptance-criteria metrics) without
retraining: `python3 scripts/measure_run.py /path/to/run_root`."""

import itertools
import json
import sys
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from apptrans import localization, synthdata, trainer
from apptrans.datamodel import HyperParams, load_image, load_manifest
from apptrans.trainer import LoadedDataset, TrainConfig

DOMAINS = ["day", "night", "fog"]


def color_stats(img):
    arr = img.numpy()
    return np.concatenate([arr.mean(axis=(1, 2)), arr.std(axis=(1, 2))])


def main(out_root: str):
    out = Path(out_root)
    specs = synthdata.default_appearances(DOMAINS)
    jitter = synthdata.PoseJitter()
    model, _ = trainer.restore(out / "run" / "checkpoint_final.pt")
    model.eval()
    dataset = LoadedDataset.open(out / "data" / "manifest.jsonl")
    held_scenes = synthdata.build_scenes(6, synthdata.PoseJitter(cluster_size=1), seed=77)
    held = {sp.domain.name: [synthdata.render(s, sp) for s in held_scenes] for sp in specs}

    def dom_exemplar(d):
        return dataset.images[next(i for i, r in enumerate(dataset.records)
                                   if r.domain.name == d)]

    held_all = [im for ims in held.values() for im in ims]
    l1 = trainer.self_reconstruction_loss(model, held_all)
    print(f"7a held-out self-reconstruction L1: {l1:.4f}  (< 0.08 ?)")

    X = np.stack([color_stats(im) for im in dataset.images])
    X = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    labels = np.array([r.domain.id for r in dataset.records])
    W, *_ = np.linalg.lstsq(X, np.eye(3)[labels], rcond=None)
    translated, targets = [], []
    with torch.no_grad():
        for src in held["day"]:
            for t_idx, t_dom in enumerate(DOMAINS):
                translated.append(model.translate(src, dom_exemplar(t_dom)))
                targets.append(t_idx)
    Xt = np.stack([color_stats(im) for im in translated])
    Xt = np.concatenate([Xt, np.ones((len(Xt), 1))], axis=1)
    pred = np.argmax(Xt @ W, axis=1)
    acc = float((pred == np.array(targets)).mean())
    print(f"7b classifier acc: {acc:.2%}  (>= 80% ?)")

    agreements = []
    with torch.no_grad():
        for src in held["day"]:
            for t_dom in ("night", "fog"):
                out_img = model.translate(src, dom_exemplar(t_dom))
                agreements.append(synthdata.edge_agreement(src, out_img))
    print(f"7c edge agreement: {np.mean(agreements):.2%} min {np.min(agreements):.2%}  (mean >= 90% ?)")

    with torch.no_grad():
        feats = {d: [model.encode_content(im) for im in held[d]] for d in DOMAINS}
    same_scene = [float((feats[a][i] - feats[b][i]).pow(2).mean())
                  for i in range(len(held_scenes))
                  for a, b in itertools.combinations(DOMAINS, 2)]
    cross_scene = [float((feats[d][i] - feats[d][j]).pow(2).mean())
                   for d in DOMAINS
                   for i, j in itertools.combinations(range(len(held_scenes)), 2)]
    print(f"7d same-scene {np.mean(same_scene):.4f} < cross-scene {np.mean(cross_scene):.4f} ? "
          f"{np.mean(same_scene) < np.mean(cross_scene)}")

    night = specs[1]
    gt = load_manifest(out / "data" / "manifest_gt.jsonl")
    refs = [r for r in gt if r.is_reference]
    query_scenes = synthdata.build_scenes(20, jitter, seed=11, pose_seed=99)
    queries = [localization.Query(synthdata.render(s, night), s.camera_pose, "night")
               for s in query_scenes]

    def recalls(m):
        db = localization.build_reference_db(
            [load_image(out / "data" / r.image_path) for r in refs],
            [r.pose for r in refs], m)
        return localization.evaluate(queries, db, m).per_group["night"]

    cfg = TrainConfig(hp=HyperParams(), out_dir=str(out / "_untrained"), seed=0)
    trained_r = recalls(model)
    untrained_r = recalls(trainer.init_params(cfg))
    print(f"8c night held-out-capture recalls trained {trained_r} vs untrained {untrained_r} "
          f"(coarse {trained_r[2]} > {untrained_r[2]} ?)")


if __name__ == "__main__":
    main(sys.argv[1])

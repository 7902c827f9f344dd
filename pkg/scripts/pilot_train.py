"""Desk-scale pilot: train on 20 scenes x 3 domains at 64x64 and measure the
training-efficacy metrics exactly as the acceptance suite will (reconstruction,
appearance transfer, content preservation, disentanglement, localization lift,
plus the post-training direction checks)."""

import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from apptrans import localization, synthdata, trainer
from apptrans.datamodel import DomainLabel, HyperParams, load_image, load_manifest
from apptrans.trainer import LoadedDataset, TrainConfig

DOMAINS = ["day", "night", "fog"]


def color_stats(img):
    arr = img.numpy()
    return np.concatenate([arr.mean(axis=(1, 2)), arr.std(axis=(1, 2))])


def main(out_root: str, steps_target: int = 5000):
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    specs = synthdata.default_appearances(DOMAINS)
    jitter = synthdata.PoseJitter()
    manifest = synthdata.generate_dataset(20, specs, jitter, out / "data", seed=11)

    n_records = 60
    total_epochs = max(round(steps_target / n_records), 2)
    flat = int(total_epochs * 0.7)
    cfg = TrainConfig(
        hp=HyperParams(epochs_flat=flat, epochs_decay=total_epochs - flat),
        out_dir=str(out / "run"), seed=0, checkpoint_interval=1000,
    )
    print(f"epochs: {flat}+{total_epochs - flat} = {total_epochs} -> {total_epochs * n_records} steps")
    final = trainer.fit(manifest, cfg, log_every=300)
    print(f"training took {(time.time() - t0) / 60:.1f} min")

    model, _ = trainer.restore(final)
    model.eval()
    dataset = LoadedDataset.open(manifest)
    held_scenes = synthdata.build_scenes(6, synthdata.PoseJitter(cluster_size=1), seed=77)
    held = {sp.domain.name: [synthdata.render(s, sp) for s in held_scenes] for sp in specs}

    def dom_exemplar(d):
        return dataset.images[next(i for i, r in enumerate(dataset.records)
                                   if r.domain.name == d)]

    # 7a
    held_all = [im for ims in held.values() for im in ims]
    l1 = trainer.self_reconstruction_loss(model, held_all)
    print(f"7a held-out self-reconstruction L1: {l1:.4f}  (< 0.08 ?)")

    # 7b
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
    per = {d: float((pred[np.array(targets) == i] == i).mean()) for i, d in enumerate(DOMAINS)}
    print(f"7b classifier acc: {acc:.2%} per-target {per}  (>= 80% ?)")

    # 7c
    agreements = []
    with torch.no_grad():
        for src in held["day"]:
            for t_dom in ("night", "fog"):
                out_img = model.translate(src, dom_exemplar(t_dom))
                agreements.append(synthdata.edge_agreement(src, out_img))
    print(f"7c edge agreement: {np.mean(agreements):.2%} min {np.min(agreements):.2%}  (mean >= 90% ?)")

    # 7d
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

    # 8c: held-out captures (fresh poses of the known places) in the hardest
    # trained domain, retrieved against the day reference database
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

    trained_r = recalls(model)
    untrained_r = recalls(trainer.init_params(cfg))
    print(f"8c night held-out-capture recalls trained {trained_r} vs untrained {untrained_r} "
          f"(coarse {trained_r[2]} > {untrained_r[2]} ?)")

    # post-training direction checks
    def flatf(img):
        with torch.no_grad():
            w = model.generate_filter(img)
        v = w.flat_weights().numpy()
        return v / np.linalg.norm(v)

    per_domain = {d: [flatf(im) for im in ims[:4]] for d, ims in held.items()}
    same = [float(np.dot(a, b)) for d in per_domain
            for a, b in itertools.combinations(per_domain[d], 2)]
    cross = [float(np.dot(a, b)) for da, db in itertools.combinations(DOMAINS, 2)
             for a in per_domain[da] for b in per_domain[db]]
    print(f"filters: same-domain cos {np.mean(same):.4f} > cross {np.mean(cross):.4f} ? "
          f"{np.mean(same) > np.mean(cross)}")

    with torch.no_grad():
        real_scores = [float(model.discriminate_image(im).mean())
                       for ims in held.values() for im in ims]
        fake_scores = [float(model.discriminate_image(
            model.translate(src, dom_exemplar(t))).mean())
            for src in held["day"] for t in ("night", "fog")]
        same_pair = [float(model.discriminate_appearance(a, b).mean())
                     for d in DOMAINS for a, b in itertools.combinations(held[d][:4], 2)]
        cross_pair = [float(model.discriminate_appearance(a, b).mean())
                      for da, db in itertools.combinations(DOMAINS, 2)
                      for a, b in zip(held[da][:4], held[db][:4])]
    print(f"D_i: real {np.mean(real_scores):.3f} > fake {np.mean(fake_scores):.3f} ? "
          f"{np.mean(real_scores) > np.mean(fake_scores)}")
    print(f"D_a: same-pair {np.mean(same_pair):.3f} > cross-pair {np.mean(cross_pair):.3f} ? "
          f"{np.mean(same_pair) > np.mean(cross_pair)}")

    rows = [json.loads(l) for l in (out / "run" / "metrics.jsonl").read_text().splitlines()]
    g = [r["loss_g_total"] for r in rows]
    print(f"progress: median last100 {np.median(g[-100:]):.2f} < first100 {np.median(g[:100]):.2f} ? "
          f"{np.median(g[-100:]) < np.median(g[:100])}")
    print(f"total {(time.time() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "/tmp/pilot",
         int(sys.argv[2]) if len(sys.argv) > 2 else 5000)

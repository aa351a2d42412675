"""Generate a small synthetic section, train briefly, and evaluate.

The generator plants a shared latent behind both modalities, so a model that
learns anything should retrieve matching tiles well above chance (10% at
Recall@10%). Run:  python demos/quickstart.py
"""
import time

from sigmma.datagen import GenConfig, generate_dataset, section_shape_for
from sigmma.evaluation import linear_probe_gex, retrieval
from sigmma.training import TrainConfig, TrainState, train

H, W = section_shape_for(48, 64)
ds = generate_dataset(GenConfig(H=H, W=W), seed=1)
print(f"{len(ds.tiles)} tiles, {ds.n_genes} genes, "
      f"{sum(t.n_cells for t in ds.tiles)} cells; split "
      + ", ".join(f"{s} {len(ds.tiles_in(s))}" for s in ("train", "val", "test")))

cfg = TrainConfig(epochs=40, d=32, d_h=32, d_score=16)
before = TrainState.fresh(ds, cfg)
r0 = retrieval(before, ds)
print(f"untrained: HE->ST R@10% {r0.he_to_st[10]:.2f}   ST->HE R@10% {r0.st_to_he[10]:.2f}")

t0 = time.perf_counter()
state = train(ds, cfg)
print(f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.0f}s; "
      f"loss {state.history[0]['L_total']:.3f} -> {state.history[-1]['L_total']:.3f}")

r1 = retrieval(state, ds)
probe = linear_probe_gex(state, ds, k=20)
print(f"trained:   HE->ST R@10% {r1.he_to_st[10]:.2f}   ST->HE R@10% {r1.st_to_he[10]:.2f}")
print(f"linear probe on image embeddings: mean PCC {probe.pcc_mean:.3f} over {probe.k} genes")

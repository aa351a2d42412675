"""Component ablation on a small dataset.

Rows add the cell graph, the multi-scale loss and learned edge selection in
turn, all with the same seed and split. At this size the differences are
noisy; the point is the mechanics, not the ranking.
"""
from sigmma.datagen import GenConfig, generate_dataset, section_shape_for
from sigmma.evaluation import run_ablation_suite
from sigmma.training import TrainConfig

H, W = section_shape_for(48, 64)
ds = generate_dataset(GenConfig(H=H, W=W), seed=1)
table = run_ablation_suite(ds, TrainConfig(epochs=25, d=32, d_h=32, d_score=16))

print(f"{'variant':<17} graph multi sparse   PCC   HE->ST@10% ST->HE@10%")
for r in table:
    print(f"{r['variant']:<17} {r['cell_graph']:>5} {r['multi_scale']:>5} {r['sparsification']:>6}  "
          f"{r['pcc']:.3f}     {r['he2st_r10']:.2f}       {r['st2he_r10']:.2f}")

"""Learn a steerer from synthetic pairs, then compare against no steering.

Stage one fits (Q, xi) from ground-truth local affines.  Evaluation uses
max similarity over a fixed rotation and scale grid, so no ground truth is
used at match time.
"""
from gl2steer.steer_train import TrainConfig, ablation_no_steerer, make_batch_affine, train

cfg = TrainConfig(stage="stage1", iterations=60, learning_rate=1e-2, batch_seeds=tuple(range(4)))
state = train(cfg)
print(f"loss {state.loss_trace[0][1]:.4f} -> {state.loss_trace[-1][1]:.4f} after {state.step} steps")
print("xi:", [round(float(v), 3) for v in state.spec.xis])

held_out = [make_batch_affine(s, cfg.batch) for s in range(100, 106)]
res = ablation_no_steerer(cfg, held_out, state=state)
for row in res["rows"]:
    print(f"  seed {row['seed']}: steerer {row['steerer']:3d}   identity {row['identity']:3d}")
print(f"total: steerer {res['steerer']}, identity {res['identity']}")

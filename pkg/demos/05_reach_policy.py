"""
Imitating a bimodal expert
==========================

A point agent must reach a goal past a disk obstacle.  The scripted
expert goes round on a random side, so the demonstrations have two modes.
We train a conditional model on action chunks and roll it out with one
and with ten sampling steps.  Training takes a couple of minutes.
"""

import numpy as np
from mscfm.harness import Checkpoint, TrainConfig, evaluate, generate_dataset, train
from mscfm.tasks import ExpertPolicy, ReachEnv, rollout_policy

env = ReachEnv()
print("expert success:", rollout_policy(env, ExpertPolicy(env), 200, seed=0))

cfg = TrainConfig(task="reach", episodes=500, epochs=200, lr=3e-3, lr_schedule="cosine",
                  ema_decay=0.999)
ds = generate_dataset(cfg)
sides = np.array(ds.metadata["sides"])
print(f"{ds.n} (observation, chunk) pairs from {len(sides)} episodes; left share {np.mean(sides == 1):.2f}")

ckpt = Checkpoint.from_result(train(cfg, ds))
for row in evaluate(ckpt, "reach", [1, 10], episodes=50)["results"]:
    print(f"NFE {row['nfe']:>2}: success {row['success_rate']:.2f}")

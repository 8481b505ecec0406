"""Weight sharing in a desk-sized supernet.

Samples a few architectures, takes one training step on each, and shows
that every step only moves the weights its path reads.  Then carves a
standalone candidate out of the supernet and checks it computes the same
embedding.

    python demos/01_weight_sharing.py
"""

import numpy as np

from speechnas import network as nw
from speechnas import tensorcore as tc
from speechnas.archspace import preset, sample_uniform, serialize
from speechnas.config import load_config
from speechnas.pipeline import train_step

cfg = load_config(overrides={"run.profile": "desk"})
space = cfg.search_space()
net = nw.Supernet(space, cfg.net_config(num_speakers=32), seed=0)
total = net.num_params(include_classifier=True)
print(f"desk space: {space.size} architectures, supernet holds {total:,} weights")

rng = np.random.default_rng(0)
velocity = {}
for _ in range(3):
    arch = sample_uniform(space, rng)
    before = {k: v.copy() for k, v in net.params.items()}
    x, y = rng.normal(size=(8, 40, 30)).astype(np.float32), rng.integers(0, 32, size=8)
    loss, _, _ = train_step(net, arch, x, y, "ce", 0.03, cfg, velocity)
    moved = sum(int((net.params[k] != before[k]).sum()) for k in net.params)
    path = nw.count_params(arch, net.config, include_classifier=True)
    print(f"{serialize(arch):32s} loss {loss:.3f}  moved {moved:,} of {total:,} (path size {path:,})")

cand = net.instantiate(arch)
x = rng.normal(size=(2, 50, 30)).astype(np.float32)
shared, _ = net.build(tc.Graph(np.float32), x, arch, "eval")
alone, _ = cand.build(tc.Graph(np.float32), x, None, "eval")
gap = np.abs(shared.data - alone.data).max()
print(f"candidate has {cand.num_params():,} parameters; max embedding difference {gap:.1e}")

print("\nparameter counts at full scale (classifier excluded):")
for name in ("speechnas3", "speechnas4", "speechnas5"):
    print(f"  {name}: {nw.count_params(preset(name), nw.FULL_SCALE_NET):,}")

"""Mixed-precision training of the desk CNN on MNIST.

Needs MNIST IDX files under $BMPQ_DATA_ROOT (default /root/data/mnist).
Run: python3 demos/desk_training.py [train_subset] [epochs]
"""

import logging
import os
import sys
import time

from bmpq.data import load_mnist
from bmpq.models import build_desk_cnn
from bmpq.packing import export_network, import_network, pack_model, unpack_model
from bmpq.storage import compression_ratios
from bmpq.training import TrainConfig, bmpq_train

logging.basicConfig(level=logging.INFO, format="%(message)s")

root = os.environ.get("BMPQ_DATA_ROOT", "/root/data/mnist")
n = int(sys.argv[1]) if len(sys.argv) > 1 else 10000
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 6

train = load_mnist(root, "train").subset(n)
test = load_mnist(root, "test")

spec = build_desk_cnn()
flex = sum(l.param_count for l in spec.flexible_layers)
print("flexible params", flex, "budget bits", 3 * flex)

# 3 bits per flexible weight: all-4 does not fit, so the allocator has to choose
cfg = TrainConfig(support_bits=[2, 4], budget_bits=3 * flex, epochs=epochs, warmup_epochs=2,
                  interval_epochs=2, lr=0.05, lr_milestones=[4, 7], seed=0)
start = time.perf_counter()
trainer = bmpq_train(spec, train, test, cfg)
print("minutes", round((time.perf_counter() - start) / 60, 1))

for a in trainer.history.assignments:
    print("epoch", a["epoch"], [a["bits"][l.name] for l in spec.layers], a["cost_bits"])

bits = trainer.network.bits
print("r32 r16", [round(r, 3) for r in compression_ratios(spec, bits)])

# round trip through the packed format
blob = pack_model(export_network(trainer.network, trainer.packed_metadata()))
net, frozen = import_network(unpack_model(blob))
x = test.with_stats(trainer.train.mean, trainer.train.std).to_float()
print("packed bytes", len(blob), "accuracy", net.accuracy(x, test.labels, frozen=frozen))

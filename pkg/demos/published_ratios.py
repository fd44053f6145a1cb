"""Storage and compression ratios for the published bit-width vectors.

Run: python3 demos/published_ratios.py
"""

from bmpq.models import build_vgg16
from bmpq.published import PUBLISHED, reproduce
from bmpq.storage import storage_fp32, storage_table

# compact 512-wide VGG head reproduces the reported ratios
for r in reproduce("compact"):
    print(f"{r['dataset']:14s} {r['model']:9s} reported {r['reported_r32']:5.1f} "
          f"r32 {r['r32']:6.3f} r16 {r['r16']:6.3f}")

# the 4096-wide head falls well short
for r in reproduce("full"):
    print(f"{r['dataset']:14s} {r['model']:9s} full head r32 {r['r32']:6.3f}")

# per-layer breakdown of the first VGG16 entry
entry = PUBLISHED[0]
spec = build_vgg16(32, 10, head="compact")
print("fp32 MB", round(storage_fp32(spec), 3))
for row in storage_table(spec, list(entry.bits)):
    print(f"{row['layer']:8s} {row['params']:>9d} {row['bits']:>3d} {row['mb']:8.4f}")

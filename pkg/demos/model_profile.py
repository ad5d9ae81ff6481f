"""
Model profiles
==============

Parameter and FLOP counts of the two students at full scale (448 px) and
desk scale (64 px). FLOPs count a multiply-accumulate as two operations.
"""

from pccl.models import SegmenterSpec, build_segmenter, count_flops, count_parameters

for scale in ("paper", "desk"):
    for kind in ("lightweight_conv", "windowed_transformer"):
        spec = SegmenterSpec.for_scale(kind, scale)
        model = build_segmenter(spec, seed=0).eval()
        print(f"{scale:5s} {kind:20s} {count_parameters(model) / 1e6:7.3f} M params "
              f"{count_flops(model) / 1e9:7.2f} GFLOPs at {spec.input_size}px")

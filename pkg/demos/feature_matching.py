"""Detect, describe and match keypoints between a texture and a rotated view.

Run: python3 demos/feature_matching.py
"""

import math

import numpy as np

from gazemap.features import detect_and_describe, match_descriptors
from gazemap.geometry import apply_homography
from gazemap.synth import make_texture, render_view


def main():
    base = make_texture(np.random.default_rng(3), 240, 320)
    a = math.radians(15)
    c = np.array([[1, 0, 160], [0, 1, 120], [0, 0, 1]], float)
    rot = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    h = c @ rot @ np.linalg.inv(c)  # view -> base
    view = render_view(base, h)

    fa, fb = detect_and_describe(base), detect_and_describe(view)
    print(f"keypoints: base {len(fa)}, rotated view {len(fb)}")
    m = match_descriptors(fa, fb)
    pa, pb = m.points(fa, fb)
    ok = np.linalg.norm(apply_homography(h, pb) - pa, axis=1) < 3.0
    print(f"mutual ratio-test matches: {len(m)}, geometrically consistent: {ok.mean():.1%}")


if __name__ == "__main__":
    main()

"""End to end in memory: synthetic scene, AOI propagation, gaze session, metrics.

Run: python3 demos/session_pipeline.py   (about half a minute on one core)
"""

from gazemap.metrics import compute_metrics, dwell_rows, search_rows
from gazemap.registry import propagate_aois, registry_from_arrays, seed_aoi
from gazemap.session import TestFrame, run_session
from gazemap.synth import SceneSpec, default_script, generate_scene, generate_session


def main():
    scene = generate_scene(SceneSpec(n_views=4))
    session = generate_session(scene, default_script(scene.spec))
    print(f"scene: base + {len(scene.views)} views; session: {len(session.frames)} frames, "
          f"{len(session.gaze_t)} gaze samples")

    reg = registry_from_arrays([("base", scene.base)] + [(v.id, v.image) for v in scene.views],
                               poses={v.id: v.pose for v in scene.views})
    for aoi_id, (label, box) in scene.aois.items():
        reg = seed_aoi(reg, aoi_id, label, "base", box)
    reg, rep = propagate_aois(reg)
    print(f"AOIs seeded on base, propagated to {len(rep.propagated)} views, uncovered: {rep.uncovered}")

    period = session.frame_period_ms
    frames = [TestFrame(i, i * period, img) for i, img in enumerate(session.frames)]
    rec = run_session(reg, session.gaze_log(), frames)
    print(f"frames localized: {rec.n_localized}/{len(frames)}")

    print("dwells (system vs truth):")
    for got, want in zip(rec.dwells, session.truth["dwells"]):
        print(f"  {got.aoi_id}: {got.duration:.0f} ms vs {want['aoi_id']}: {want['duration_ms']:.0f} ms")

    m = compute_metrics(rec.fixations, rec.dwells, rec.span_ms, list(scene.aois))
    for row in dwell_rows(m, list(scene.aois)) + search_rows(m):
        print("  " + "\t".join(str(c) for c in row))


if __name__ == "__main__":
    main()

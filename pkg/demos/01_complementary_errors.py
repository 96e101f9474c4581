"""Where the two painting sources go wrong, on one synthetic scene.

The 2D source re-projects a segmentation mask whose object silhouettes have
been dilated, so background points in the frustum behind an object pick up the
object's class. The 3D source has exact boundaries but confuses foreground
classes with each other. The errors land on disjoint sets of points, which is
what gives a fusion gate something to learn.

    python demos/01_complementary_errors.py [--seed 7] [--out /tmp/scene]
"""

import argparse

import numpy as np

from fusionpaint import fileio
from fusionpaint.painting import points_in_box
from fusionpaint.synthbench import CLASS_NAMES, SceneSpec, generate_scene, paint_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--bleed", type=int, default=4, help="mask dilation radius in pixels")
    ap.add_argument("--confusion", type=float, default=0.2)
    ap.add_argument("--out", help="write the clean and bled masks here as PGM")
    args = ap.parse_args()

    scene = generate_scene(SceneSpec(seed=args.seed, bleed_radius=args.bleed, confusion_p=args.confusion))
    p2d, p3d = paint_scene(scene, args.confusion)
    truth = scene.true_labels
    lab2, lab3 = p2d.argmax(axis=1), p3d.argmax(axis=1)

    print(f"scene seed {args.seed}: {scene.points.n} points, {len(scene.boxes)} boxes")
    for b in scene.boxes:
        print(f"  {CLASS_NAMES[b.class_id]:22s} at ({b.center[0]:6.1f}, {b.center[1]:6.1f})"
              f"  {int(points_in_box(scene.points, b).sum())} points")

    fg = truth > 0
    bleed = (~fg) & (lab2 > 0)
    confused = fg & (lab3 != truth)
    print(f"\n2D painting: {bleed.sum()} background points painted as objects (frustum bleed)")
    print(f"             {(fg & (lab2 != truth)).sum()} foreground points wrong (occlusion, out of view)")
    print(f"3D painting: {confused.sum()} foreground points given the wrong object class")
    print(f"             {((~fg) & (lab3 != truth)).sum()} background points wrong")
    print(f"points wrong in both sources: {((lab2 != truth) & (lab3 != truth)).sum()}")

    grown = (scene.mask_corrupt.data > 0).sum() - (scene.mask_clean.data > 0).sum()
    print(f"\nmask: {grown} extra foreground pixels after dilation by {args.bleed}")
    if args.out:
        fileio.write_mask(f"{args.out}/mask_clean.pgm", scene.mask_clean)
        fileio.write_mask(f"{args.out}/mask_corrupt.pgm", scene.mask_corrupt)
        # masks hold class ids 0..10; stretch them so the PGMs are viewable
        for name, mask in (("clean", scene.mask_clean), ("corrupt", scene.mask_corrupt)):
            view = type(mask)((mask.data.astype(np.int64) * 25).clip(0, 255), 256)
            fileio.write_mask(f"{args.out}/view_{name}.pgm", view)
        print(f"masks written to {args.out}")


if __name__ == "__main__":
    main()

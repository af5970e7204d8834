"""Writes the golden sample fixture with explicit little-endian packing.

Independent of the C++ writer: payloads are packed with struct '<' formats and
expected values are recorded in expected.json for the loader test.
"""
import json
import os
import struct

H, W, C = 6, 4, 3
OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "golden_sample")


def main():
    os.makedirs(OUT, exist_ok=True)
    semantic = [((c * 7 + i * 3) % 5 == 0) * 1 for c in range(C) for i in range(H * W)]
    instance = [0 if i % 3 == 0 else 256 + i for i in range(H * W)]  # exercises the high byte
    direction = [0 if i % 3 == 0 else 1 + (i * 5) % 36 for i in range(H * W)]
    observation = [((c + 1) * (i + 1)) / 97.0 for c in range(C) for i in range(H * W)]
    observation = [struct.unpack("<f", struct.pack("<f", v))[0] for v in observation]

    with open(os.path.join(OUT, "semantic.u8.bin"), "wb") as f:
        f.write(struct.pack("<%dB" % len(semantic), *semantic))
    with open(os.path.join(OUT, "instance.u16.bin"), "wb") as f:
        f.write(struct.pack("<%dH" % len(instance), *instance))
    with open(os.path.join(OUT, "direction.u8.bin"), "wb") as f:
        f.write(struct.pack("<%dB" % len(direction), *direction))
    with open(os.path.join(OUT, "observation.f32.bin"), "wb") as f:
        f.write(struct.pack("<%df" % len(observation), *observation))

    manifest = {
        "schema_version": 1,
        "scene_seed": 18446744073709551557,
        "grid": {"height_px": H, "width_px": W, "resolution": 0.5, "x_range": [0.0, 3.0], "y_range": [-1.0, 1.0]},
        "class_names": ["divider", "ped_crossing", "boundary"],
        "n_dir": 36,
        "dtypes": {"semantic": "u8", "instance": "u16", "direction": "u8", "observation": "f32"},
        "shapes": {"semantic": [C, H, W], "instance": [H, W], "direction": [H, W], "observation": [C, H, W]},
        "endianness": "little",
        "meta": {"origin": "golden"},
    }
    with open(os.path.join(OUT, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    expected = {
        "scene_seed": manifest["scene_seed"],
        "semantic": semantic,
        "instance": instance,
        "direction": direction,
        "observation": observation,
    }
    with open(os.path.join(os.path.dirname(OUT), "golden_expected.json"), "w") as f:
        json.dump(expected, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()

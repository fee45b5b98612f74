#!/usr/bin/env python3
"""Regenerate the bundled graded-noise study configs in docs/.

The pair consists of a phantom spec (four touching box pairs with
uniform sizes) and a 13-scan noise spec whose per-structure flip
probabilities come from the frozen severity protocol. Running
``segqc simulate --phantom docs/paired_boxes_phantom.json
--noise docs/graded_noise.json --with-probs --out <dir>`` reproduces the
dataset the correlation acceptance check evaluates.
"""

import json
from pathlib import Path

from segqc.io import write_phantom_json
from segqc.synth import contact_pair_phantom, graded_severities

DOCS = Path(__file__).resolve().parent.parent / "docs"


def main() -> None:
    DOCS.mkdir(exist_ok=True)
    write_phantom_json(contact_pair_phantom(), DOCS / "paired_boxes_phantom.json")
    doc = {
        "n_samples": 15,
        "default_flip_prob": 0.0,
        "erosion_dilation_radius": 0,
        "scans": [
            {
                "scan_id": f"scan_{k:02d}",
                "seed": 1000 + k,
                "flip_probs": {str(lid): p for lid, p in probs},
            }
            for k, probs in enumerate(graded_severities())
        ],
    }
    (DOCS / "graded_noise.json").write_text(
        json.dumps(doc, indent=2) + "\n", encoding="utf-8"
    )
    print(f"wrote {DOCS / 'paired_boxes_phantom.json'}")
    print(f"wrote {DOCS / 'graded_noise.json'}")


if __name__ == "__main__":
    main()

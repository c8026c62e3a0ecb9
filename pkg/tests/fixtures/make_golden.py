"""Regenerates the golden eval fixture. Run once; the outputs are checked in.

The recorded cosine similarity is computed with plain Python floats and
``math.fsum`` so that it does not depend on the package's metric code.
"""

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from pgla.formats import GradientFile
from pgla.layout import GradientVector, LayerLayout

HERE = Path(__file__).parent


def main():
    rng = np.random.default_rng(20240601)
    layout = LayerLayout.from_shapes([("layer0.weight", (16, 6)), ("layer0.bias", (6,)),
                                      ("layer2.weight", (6, 3)), ("layer2.bias", (3,))])
    clean = rng.normal(0, 0.05, layout.total).astype(np.float32)
    recovered = (clean + rng.normal(0, 0.03, layout.total)).astype(np.float32)
    digest = hashlib.sha256(b"golden fixture").digest()
    GradientFile.from_vectors([GradientVector(clean, layout, "clean")], digest, 7).save(HERE / "golden_clean.pgrd")
    GradientFile.from_vectors([GradientVector(recovered, layout, "recovered")], digest, 7).save(
        HERE / "golden_recovered.pgrd")
    a = [float(v) for v in recovered]
    b = [float(v) for v in clean]
    dot = math.fsum(x * y for x, y in zip(a, b))
    cos = dot / (math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b)))
    (HERE / "golden.json").write_text(json.dumps({"cos_g": cos}, indent=2) + "\n")


if __name__ == "__main__":
    main()

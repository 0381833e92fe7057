"""Regenerate the pristine corpus PNGs and the fitted scorer model.

Deterministic: the corpus comes from fixed seeds, so rerunning this script
reproduces byte-identical data files.
"""
from __future__ import annotations

from pathlib import Path

from pixelplan.imagecore import decode_image, encode_png
from pixelplan.metrics.niqe import fit_niqe_model, save_niqe_model
from pixelplan.synthimg import PRISTINE_SEEDS, synth_pristine

DATA = Path(__file__).resolve().parent.parent / "src" / "pixelplan" / "data"


def main() -> None:
    pristine_dir = DATA / "pristine"
    pristine_dir.mkdir(parents=True, exist_ok=True)
    decoded = []
    for seed in PRISTINE_SEEDS:
        png = encode_png(synth_pristine(seed))
        (pristine_dir / f"p{seed}.png").write_bytes(png)
        decoded.append(decode_image(png))
    model = fit_niqe_model(decoded)
    save_niqe_model(model, DATA / "niqe_model.json")
    print(f"wrote {len(decoded)} corpus images and the model to {DATA}")


if __name__ == "__main__":
    main()

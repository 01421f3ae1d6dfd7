"""All network parameters of the pipeline bundled together, with load/save through the weight-bundle format."""

from dataclasses import dataclass

import numpy as np

from .cmr import DecoderWeights
from .encoder import DEFAULT_HIDDEN, EncoderWeights
from .exceptions import SchemaError
from .prg import DEFAULT_TAU, GATE_HIDDEN, GatingParams
from .projection import DEFAULT_EMBED_CHANNELS
from .tensorio import read_bundle, write_bundle

_ROLES = {
    "encoder.ftm": "feature transform matrix (12x12) of one input stream",
    "encoder.coord": "attentive-aggregation layer of the coordinate stream",
    "encoder.normal": "attentive-aggregation layer of the normal stream",
    "encoder.fuse": "fusion of concatenated stage outputs to 128 channels",
    "prg.transform_2d": "2D embedding to 3D feature space",
    "prg.gate": "residual gate MLP",
    "decoder.attn_proj": "attention logits per slot",
    "decoder.bottleneck": "slot to query reduction",
    "decoder.kernel_head": "dynamic mask kernel head",
    "decoder.class_head": "class logit head",
    "decoder.obj_head": "objectness head",
    "decoder.mask_proj": "per-face mask embedding",
}


def _role(name):
    for prefix, role in _ROLES.items():
        if name.startswith(prefix):
            return role
    return ""


@dataclass(frozen=True, eq=False)
class ModelWeights:
    encoder: EncoderWeights
    gating: GatingParams
    decoder: DecoderWeights
    meta: dict = None

    @classmethod
    def seeded(cls, seed, hidden=DEFAULT_HIDDEN, embed_channels=DEFAULT_EMBED_CHANNELS, tau=DEFAULT_TAU):
        """Draw every block from one ``default_rng(seed)`` stream in a fixed order."""
        rng = np.random.default_rng(seed)
        enc = EncoderWeights.seeded(seed, hidden=hidden, rng=rng)
        gating = GatingParams.seeded(seed, embed_channels=embed_channels, hidden=GATE_HIDDEN, tau=tau, rng=rng)
        dec = DecoderWeights.seeded(seed, rng=rng)
        meta = {"generator": "numpy.PCG64", "seed": int(seed), "init": "uniform(-0.1, 0.1)",
                "hidden": int(hidden), "embed_channels": int(embed_channels), "tau": float(tau)}
        return cls(enc, gating, dec, meta)

    def tensors(self):
        return {**self.encoder.tensors(), **self.gating.tensors(), **self.decoder.tensors()}

    def save(self, directory):
        t = self.tensors()
        write_bundle(directory, t, {name: _role(name) for name in t}, meta=self.meta or {})

    @classmethod
    def load(cls, directory):
        t, meta = read_bundle(directory)
        try:
            enc = EncoderWeights.from_tensors(t, source=f"file:{directory}")
            gating = GatingParams.from_tensors(t, tau=meta.get("tau", DEFAULT_TAU))
            dec = DecoderWeights.from_tensors(t)
        except KeyError as exc:
            raise SchemaError(f"{directory}: weight bundle lacks tensor {exc.args[0]!r}") from None
        return cls(enc, gating, dec, meta)

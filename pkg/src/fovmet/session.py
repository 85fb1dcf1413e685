"""ABX session plans: trial schedules, stimulus references, rendering.

A session is a seeded shuffle of the full design grid (images x scales x
conditions x repetitions). Every trial shows three stimuli: A, B, and X,
where X re-presents either A or B (seeded coin flip). In the
synth-vs-synth condition A and B are two noise seeds of the same
image/scale; in synth-vs-reference one of them is the decoded reference.
Stimulus ids are opaque hashes so no payload built from a plan can leak
which interval X matches.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .features import WeightManifest, decode, encode, write_image
from .geometry import PoolingConfig, build_pooling_masks
from .psychometrics import CONDITIONS
from .styletransfer import AlphaField, synthesize_metamer

__all__ = [
    "StimulusRef",
    "TrialSpec",
    "SessionPlan",
    "build_session_plan",
    "save_plan",
    "load_plan",
    "render_stimuli",
]


@dataclass(frozen=True)
class StimulusRef:
    """What an opaque stimulus id stands for, server-side only."""

    image_id: str
    scale: float
    kind: str  # "metamer" or "reference"
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("metamer", "reference"):
            raise ValueError(f"unknown stimulus kind {self.kind!r}")
        if self.kind == "metamer" and self.seed is None:
            raise ValueError("metamer stimulus needs a seed")


@dataclass(frozen=True)
class TrialSpec:
    """One scheduled ABX trial; answer lives here and never in payloads."""

    index: int
    condition: str
    scale: float
    image_id: str
    stimulus_a: str
    stimulus_b: str
    stimulus_x: str
    answer: str  # "A" or "B": which interval X re-presents

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition {self.condition!r} not in {CONDITIONS}")
        if self.answer not in ("A", "B"):
            raise ValueError(f"answer {self.answer!r} must be 'A' or 'B'")


@dataclass(frozen=True)
class SessionPlan:
    """Fixed trial order plus the stimulus registry backing it."""

    session_id: str
    trials: tuple
    stimuli: dict  # opaque id -> StimulusRef
    stimulus_ms: int = 500
    blank_ms: int = 250
    seed: int = 0
    design: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trials)

    def client_manifest(self) -> dict:
        """Payload safe to hand to a client: ids and timing, no answers."""
        return {
            "session_id": self.session_id,
            "n_trials": len(self.trials),
            "stimulus_ms": self.stimulus_ms,
            "blank_ms": self.blank_ms,
            "trials": [
                {
                    "index": t.index,
                    "stimulus_a": t.stimulus_a,
                    "stimulus_b": t.stimulus_b,
                    "stimulus_x": t.stimulus_x,
                }
                for t in self.trials
            ],
        }


def _opaque_id(session_id: str, seed: int, trial_index: int, slot: str) -> str:
    digest = hashlib.sha256(
        f"{session_id}:{seed}:{trial_index}:{slot}".encode()
    ).hexdigest()
    return digest[:16]


def build_session_plan(
    image_ids,
    scales,
    conditions=CONDITIONS,
    repetitions: int = 1,
    seed: int = 0,
    session_id: str | None = None,
    stimulus_ms: int = 500,
    blank_ms: int = 250,
) -> SessionPlan:
    """Seeded shuffle of the full design grid into an ordered trial list.

    Every (image, scale, condition) cell appears exactly repetitions
    times. Metamer seeds are drawn from the session rng so that two
    sessions with different seeds use different noise realizations.
    """
    image_ids = list(image_ids)
    scales = [float(s) for s in scales]
    conditions = list(conditions)
    if not image_ids or not scales or not conditions or repetitions < 1:
        raise ValueError("design needs images, scales, conditions, repetitions >= 1")
    for c in conditions:
        if c not in CONDITIONS:
            raise ValueError(f"condition {c!r} not in {CONDITIONS}")
    rng = np.random.default_rng(seed)
    if session_id is None:
        session_id = f"session-{seed:08d}"

    cells = [
        (cond, scale, image_id)
        for cond in conditions
        for scale in scales
        for image_id in image_ids
        for _ in range(repetitions)
    ]
    order = rng.permutation(len(cells))

    trials = []
    stimuli: dict = {}
    for index, cell_idx in enumerate(order):
        cond, scale, image_id = cells[cell_idx]
        id_a = _opaque_id(session_id, seed, index, "a")
        id_b = _opaque_id(session_id, seed, index, "b")
        id_x = _opaque_id(session_id, seed, index, "x")
        seed_a = int(rng.integers(1, 1 << 31))
        seed_b = int(rng.integers(1, 1 << 31))
        if cond == "synth-vs-synth":
            ref_a = StimulusRef(image_id, scale, "metamer", seed_a)
            ref_b = StimulusRef(image_id, scale, "metamer", seed_b)
        else:
            # seeded coin: which interval holds the decoded reference
            if rng.random() < 0.5:
                ref_a = StimulusRef(image_id, scale, "reference")
                ref_b = StimulusRef(image_id, scale, "metamer", seed_b)
            else:
                ref_a = StimulusRef(image_id, scale, "metamer", seed_a)
                ref_b = StimulusRef(image_id, scale, "reference")
        answer = "A" if rng.random() < 0.5 else "B"
        stimuli[id_a] = ref_a
        stimuli[id_b] = ref_b
        stimuli[id_x] = ref_a if answer == "A" else ref_b
        trials.append(
            TrialSpec(
                index=index,
                condition=cond,
                scale=scale,
                image_id=image_id,
                stimulus_a=id_a,
                stimulus_b=id_b,
                stimulus_x=id_x,
                answer=answer,
            )
        )
    return SessionPlan(
        session_id=session_id,
        trials=tuple(trials),
        stimuli=stimuli,
        stimulus_ms=stimulus_ms,
        blank_ms=blank_ms,
        seed=seed,
        design={
            "images": image_ids,
            "scales": scales,
            "conditions": conditions,
            "repetitions": repetitions,
        },
    )


def save_plan(plan: SessionPlan, path) -> None:
    data = {
        "session_id": plan.session_id,
        "stimulus_ms": plan.stimulus_ms,
        "blank_ms": plan.blank_ms,
        "seed": plan.seed,
        "design": plan.design,
        "trials": [dataclasses.asdict(t) for t in plan.trials],
        "stimuli": {k: dataclasses.asdict(v) for k, v in plan.stimuli.items()},
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)


def load_plan(path) -> SessionPlan:
    with open(path) as fh:
        data = json.load(fh)
    try:
        trials = tuple(TrialSpec(**t) for t in data["trials"])
        stimuli = {k: StimulusRef(**v) for k, v in data["stimuli"].items()}
        return SessionPlan(
            session_id=data["session_id"],
            trials=trials,
            stimuli=stimuli,
            stimulus_ms=int(data["stimulus_ms"]),
            blank_ms=int(data["blank_ms"]),
            seed=int(data.get("seed", 0)),
            design=data.get("design", {}),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed session plan: {exc}") from exc


def render_stimuli(
    plan: SessionPlan,
    images: dict,
    encoder: WeightManifest,
    decoder: WeightManifest,
    config: PoolingConfig,
    out_dir,
    gamma=None,
    alpha: float | None = None,
) -> dict:
    """Render every referenced stimulus to out_dir as PNG files.

    images maps image_id to a (3, H, W) float array in [0, 1]. Strengths
    come from a fitted gamma rule or one uniform alpha (exactly one).
    Returns opaque id -> file path. X shares its source's parameters, so
    its file is a fresh render of identical content.
    """
    if (gamma is None) == (alpha is None):
        raise ValueError("provide exactly one of gamma or alpha")
    out = {}
    masks_by_scale: dict = {}
    reference_cache: dict = {}
    metamer_cache: dict = {}
    for opaque, ref in plan.stimuli.items():
        if ref.image_id not in images:
            raise ValueError(f"stimulus {opaque}: no source image {ref.image_id!r}")
        if ref.scale not in masks_by_scale:
            masks_by_scale[ref.scale] = build_pooling_masks(
                dataclasses.replace(config, scale=ref.scale)
            )
        masks = masks_by_scale[ref.scale]
        if ref.kind == "reference":
            key = (ref.image_id,)
            if key not in reference_cache:
                reference_cache[key] = decode(
                    encode(images[ref.image_id], encoder), decoder
                )
            stimulus = reference_cache[key]
        else:
            key = (ref.image_id, ref.scale, ref.seed)
            if key not in metamer_cache:
                if gamma is not None:
                    result = synthesize_metamer(
                        images[ref.image_id], ref.seed, masks, encoder, decoder,
                        gamma=gamma,
                    )
                else:
                    result = synthesize_metamer(
                        images[ref.image_id], ref.seed, masks, encoder, decoder,
                        alphas=AlphaField.uniform(alpha, masks),
                    )
                metamer_cache[key] = result.image
            stimulus = metamer_cache[key]
        path = f"{out_dir}/{opaque}.png"
        write_image(path, stimulus)
        out[opaque] = path
    return out

"""Deterministic generator of synthetic multimodal extraction datasets.

Three task families share one entity lexicon but disagree, on a controllable
fraction of it, about the type each entity maps to:

  family 0 (entity mentions):  <ent> TYPE SURFACE          per entity
  family 1 (relation pairs):   <rel> TYPE HEAD TAIL        per adjacent pair
  family 2 (event frames):     <evt> TYPE TRIGGER ARG      per entity

TYPE always comes from the family's own entity->type table. At conflict
rate 0 the three tables coincide; at rate 1 every entity is typed three
pairwise-different ways, which is what makes joint training collide.

A fraction of samples hide one entity behind the ambiguous surface token:
its identity is then carried only by the visual prefix (a noisy scaled
basis vector per entity, so nearest-code decoding is exact and the data
has zero Bayes error by construction).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import derive_rng

Array = np.ndarray

SCHEMA_TAG = "clorae-dataset-v1"

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
ENT_TAG, REL_TAG, EVT_TAG = "<ent>", "<rel>", "<evt>"
TAG_ARITY = {ENT_TAG: 2, REL_TAG: 3, EVT_TAG: 3}
AMBIGUOUS = "pic"

FAMILY_INSTRUCTIONS = {
    0: ["find", "entity", "mentions"],
    1: ["find", "relation", "pairs"],
    2: ["find", "event", "frames"],
}
FAMILY_TAGS = {0: ENT_TAG, 1: REL_TAG, 2: EVT_TAG}
INSTRUCTION_WORDS = ["find", "entity", "mentions", "relation", "pairs",
                     "event", "frames"]

# Bounded noise on visual vectors: far below half the distance between two
# codebook vectors, so nearest-code decoding can never flip.
VISUAL_NOISE = 0.03


class GeneratorError(ValueError):
    """Invalid generator specification."""


@dataclass(frozen=True)
class DatasetSpec:
    family: int
    train: int
    dev: int
    test: int

    def count(self, split: str) -> int:
        return {"train": self.train, "dev": self.dev, "test": self.test}[split]


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int = 0
    datasets: dict = field(default_factory=lambda: {
        "ent-a": DatasetSpec(0, 2000, 500, 500),
        "rel-a": DatasetSpec(1, 2000, 500, 500),
        "evt-a": DatasetSpec(2, 2000, 500, 500),
    })
    vocab_size: int = 128
    d_model: int = 64
    visual_len: int = 4
    conflict_rate: float = 0.5
    visual_rate: float = 0.3
    n_types: int = 4
    n_entities: int = 24
    n_verbs: int = 6
    fill_min: int = 3
    fill_max: int = 6
    max_entities: int = 3

    def validate(self) -> None:
        if not self.datasets:
            raise GeneratorError("need at least one dataset")
        for ds_id, ds in self.datasets.items():
            if ds.family not in FAMILY_INSTRUCTIONS:
                raise GeneratorError(f"{ds_id}: unknown task family {ds.family}")
            for split in ("train", "dev", "test"):
                if ds.count(split) <= 0:
                    raise GeneratorError(
                        f"{ds_id}: {split} count must be positive, got "
                        f"{ds.count(split)}")
        if not 0.0 <= self.conflict_rate <= 1.0:
            raise GeneratorError(f"conflict_rate must be in [0,1]")
        if not 0.0 <= self.visual_rate <= 1.0:
            raise GeneratorError(f"visual_rate must be in [0,1]")
        if self.n_types < 3:
            raise GeneratorError("need >= 3 types for three-way conflicts")
        if self.d_model < self.n_entities:
            raise GeneratorError(
                f"d_model {self.d_model} < n_entities {self.n_entities}; the "
                "visual codebook needs one basis direction per entity")
        if self.visual_len < 1:
            raise GeneratorError("visual_len must be >= 1")
        if self.max_entities < 2:
            raise GeneratorError("max_entities must be >= 2 (relations need pairs)")
        if self.fill_min < 1 or self.fill_max < self.fill_min:
            raise GeneratorError("need 1 <= fill_min <= fill_max")
        if self.n_filler() < 4:
            raise GeneratorError(
                f"vocab_size {self.vocab_size} leaves too few filler tokens")

    # -- vocabulary layout -------------------------------------------------

    def type_tokens(self) -> list[str]:
        return [f"type_{chr(ord('a') + i)}" for i in range(self.n_types)]

    def entity_tokens(self) -> list[str]:
        return [f"ent_{i:02d}" for i in range(self.n_entities)]

    def verb_tokens(self) -> list[str]:
        return [f"act_{i}" for i in range(self.n_verbs)]

    def n_filler(self) -> int:
        fixed = (3 + len(TAG_ARITY) + self.n_types + len(INSTRUCTION_WORDS)
                 + 1 + self.n_verbs + self.n_entities)
        return self.vocab_size - fixed

    def filler_tokens(self) -> list[str]:
        return [f"w_{i:02d}" for i in range(self.n_filler())]

    def vocab_tokens(self) -> list[str]:
        return ([PAD, BOS, EOS] + list(TAG_ARITY) + self.type_tokens()
                + INSTRUCTION_WORDS + [AMBIGUOUS] + self.verb_tokens()
                + self.entity_tokens() + self.filler_tokens())

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "seed", "vocab_size", "d_model", "visual_len", "conflict_rate",
            "visual_rate", "n_types", "n_entities", "n_verbs", "fill_min",
            "fill_max", "max_entities")}
        d["datasets"] = {k: {"family": v.family, "train": v.train,
                             "dev": v.dev, "test": v.test}
                         for k, v in self.datasets.items()}
        return d

    @staticmethod
    def from_json(d: dict) -> "GeneratorSpec":
        datasets = {k: DatasetSpec(v["family"], v["train"], v["dev"], v["test"])
                    for k, v in d["datasets"].items()}
        kwargs = {k: v for k, v in d.items() if k != "datasets"}
        return GeneratorSpec(datasets=datasets, **kwargs)


class GeneratorTables:
    """The gold mappings behind a spec; shared by generator and oracle."""

    def __init__(self, spec: GeneratorSpec):
        spec.validate()
        self.spec = spec
        rng = derive_rng(spec.seed, "tables")
        n_ent, n_types = spec.n_entities, spec.n_types
        base = rng.integers(0, n_types, size=n_ent)
        order = rng.permutation(n_ent)
        n_conflicted = int(np.ceil(spec.conflict_rate * n_ent))
        conflicted = np.zeros(n_ent, dtype=bool)
        conflicted[order[:n_conflicted]] = True
        self.conflicted = conflicted
        # Per-family type table. Conflicted entities get three pairwise
        # different types drawn independently, so no systematic cross-family
        # rule exists and a shared adapter must absorb raw contradictions;
        # the rest agree everywhere.
        fam1 = base.copy()
        fam2 = base.copy()
        for e in np.flatnonzero(conflicted):
            others = [t for t in range(n_types) if t != base[e]]
            fam1[e] = others[rng.integers(0, len(others))]
            remaining = [t for t in range(n_types)
                         if t not in (base[e], fam1[e])]
            fam2[e] = remaining[rng.integers(0, len(remaining))]
        self.type_table = np.stack([base, fam1, fam2])
        # Visual codebook: permuted scaled basis vectors, one per entity.
        perm = rng.permutation(spec.d_model)[:n_ent]
        codes = np.zeros((n_ent, spec.d_model))
        codes[np.arange(n_ent), perm] = 1.0
        self.codebook = codes
        self.null_code = np.zeros(spec.d_model)

    def entity_type(self, family: int, entity_idx: int) -> str:
        return self.spec.type_tokens()[self.type_table[family, entity_idx]]

    def decode_visual(self, row: Array) -> int:
        """Exact nearest-code lookup of the entity behind a visual row."""
        d = self.codebook - np.asarray(row)[None, :]
        return int(np.argmin((d * d).sum(axis=1)))


def _gold_records(family: int, slots: list[tuple[str, int]],
                  trigger: str | None, tables: GeneratorTables) -> list[tuple]:
    """Records for the entity slots (surface, latent entity idx) in text order."""
    if family == 0:
        return [(ENT_TAG, tables.entity_type(0, e), s) for s, e in slots]
    if family == 1:
        return [(REL_TAG, tables.entity_type(1, slots[i][1]),
                 slots[i][0], slots[i + 1][0])
                for i in range(len(slots) - 1)]
    return [(EVT_TAG, tables.entity_type(2, e), trigger, s) for s, e in slots]


def records_to_tokens(records: list[tuple]) -> list[str]:
    return [tok for rec in records for tok in rec]


def _build_sample(family: int, dataset_id: str, sample_id: str,
                  tables: GeneratorTables, rng: np.random.Generator) -> dict:
    spec = tables.spec
    n_min = 2 if family == 1 else 1
    n_ent = int(rng.integers(n_min, spec.max_entities + 1))
    entity_ids = rng.integers(0, spec.n_entities, size=n_ent)

    ambiguous_slot = -1
    if rng.random() < spec.visual_rate:
        # Relation types come from pair heads, so a tail-only ambiguity would
        # leave the answer text-recoverable; never hide the last slot there.
        hi = n_ent - 1 if family == 1 else n_ent
        ambiguous_slot = int(rng.integers(0, hi))

    entity_names = spec.entity_tokens()
    slots: list[tuple[str, int]] = []
    for j, e in enumerate(entity_ids):
        surface = AMBIGUOUS if j == ambiguous_slot else entity_names[e]
        slots.append((surface, int(e)))

    n_fill = int(rng.integers(spec.fill_min, spec.fill_max + 1))
    filler = spec.filler_tokens()
    words = [filler[i] for i in rng.integers(0, len(filler), size=n_fill)]
    trigger = None
    if family == 2:
        trigger = spec.verb_tokens()[int(rng.integers(0, spec.n_verbs))]
        words.append(trigger)

    # Place entity slots among the other words, preserving slot order.
    text: list[str] = list(words)
    positions = sorted(rng.integers(0, len(text) + 1, size=n_ent))
    for offset, ((surface, _), pos) in enumerate(zip(slots, positions)):
        text.insert(pos + offset, surface)

    visual = np.tile(tables.null_code, (spec.visual_len, 1))
    if ambiguous_slot >= 0:
        visual[0] = tables.codebook[slots[ambiguous_slot][1]]
    visual = visual + rng.uniform(-VISUAL_NOISE, VISUAL_NOISE, size=visual.shape)

    records = _gold_records(family, slots, trigger, tables)
    return {
        "task": family,
        "dataset": dataset_id,
        "instruction": list(FAMILY_INSTRUCTIONS[family]),
        "text": text,
        "visual": visual,
        "answer": records_to_tokens(records),
        "id": sample_id,
    }


def generate(spec: GeneratorSpec) -> dict[str, dict[str, list[dict]]]:
    """All datasets and splits for a spec; identical spec, identical data."""
    tables = GeneratorTables(spec)
    out: dict[str, dict[str, list[dict]]] = {}
    for ds_id in sorted(spec.datasets):
        ds = spec.datasets[ds_id]
        out[ds_id] = {}
        for split in ("train", "dev", "test"):
            rng = derive_rng(spec.seed, "data", ds_id, split)
            samples = [
                _build_sample(ds.family, ds_id, f"{ds_id}/{split}/{i:05d}",
                              tables, rng)
                for i in range(ds.count(split))
            ]
            out[ds_id][split] = samples
    return out


# -- serialization ---------------------------------------------------------


def _fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def sample_to_json_line(sample: dict) -> str:
    """One-line JSON with floats at 17 significant digits (bit-exact reload)."""
    vis = "[" + ",".join(
        "[" + ",".join(_fmt_float(v) for v in row) + "]"
        for row in np.asarray(sample["visual"])) + "]"
    parts = [
        f'"task":{int(sample["task"])}',
        f'"dataset":{json.dumps(sample["dataset"])}',
        f'"instruction":{json.dumps(list(sample["instruction"]))}',
        f'"text":{json.dumps(list(sample["text"]))}',
        f'"visual":{vis}',
        f'"answer":{json.dumps(list(sample["answer"]))}',
        f'"id":{json.dumps(sample["id"])}',
    ]
    return "{" + ",".join(parts) + "}"


def sample_from_json_line(line: str) -> dict:
    d = json.loads(line)
    d["visual"] = np.array(d["visual"], dtype=np.float64)
    return d


def write_datasets(spec: GeneratorSpec, out_dir: str | Path) -> Path:
    """Write one JSONL file per (dataset, split) plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = generate(spec)
    files = {}
    for ds_id, splits in data.items():
        for split, samples in splits.items():
            fname = f"{ds_id}.{split}.jsonl"
            path = out_dir / fname
            with open(path, "w", encoding="utf-8") as f:
                for s in samples:
                    f.write(sample_to_json_line(s) + "\n")
            files[f"{ds_id}.{split}"] = fname
    manifest = {
        "schema": SCHEMA_TAG,
        "generator": spec.to_json(),
        "vocab": spec.vocab_tokens(),
        "files": files,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return out_dir


def load_datasets(data_dir: str | Path) -> tuple[GeneratorSpec, dict]:
    """Load a generated directory back into memory."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise GeneratorError(f"no manifest.json under {data_dir}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("schema") != SCHEMA_TAG:
        raise GeneratorError(
            f"unsupported dataset schema {manifest.get('schema')!r}; "
            f"expected {SCHEMA_TAG}")
    spec = GeneratorSpec.from_json(manifest["generator"])
    data: dict[str, dict[str, list[dict]]] = {}
    for key, fname in manifest["files"].items():
        ds_id, split = key.rsplit(".", 1)
        with open(data_dir / fname, encoding="utf-8") as f:
            samples = [sample_from_json_line(line) for line in f if line.strip()]
        data.setdefault(ds_id, {})[split] = samples
    return spec, data


# -- gold-table oracles ------------------------------------------------------


class LookupOracle:
    """Answers straight from the generator's tables.

    With the visual prefix it is exact on every split (the data has zero
    Bayes error); restricted to text it must guess the type of ambiguous
    mentions and caps out below that ceiling.
    """

    def __init__(self, spec: GeneratorSpec, use_visual: bool = True):
        self.tables = GeneratorTables(spec)
        self.use_visual = use_visual
        self._surface_to_idx = {s: i for i, s in enumerate(spec.entity_tokens())}
        self._verbs = set(spec.verb_tokens())

    def affected(self, sample: dict) -> bool:
        return AMBIGUOUS in sample["text"]

    def predict_records(self, sample: dict) -> list[tuple]:
        family = sample["task"]
        slots: list[tuple[str, int]] = []
        trigger = None
        for tok in sample["text"]:
            if tok in self._surface_to_idx:
                slots.append((tok, self._surface_to_idx[tok]))
            elif tok == AMBIGUOUS:
                if self.use_visual:
                    latent = self.tables.decode_visual(sample["visual"][0])
                else:
                    latent = 0  # text-only fallback: fixed guess
                slots.append((tok, latent))
            elif tok in self._verbs:
                trigger = tok
        return _gold_records(family, slots, trigger, self.tables)

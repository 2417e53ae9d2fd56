"""Report ingestion, weak-label normalization, patient-level splits,
tokenization, and a synthetic report-corpus generator.

The generator plants per-label phrase signals so the classification task is
honestly learnable (a bag-of-words linear probe must reach 0.95 weighted F1
before any DP experiment runs -- see ``learnability_check``). Corpora are
line-delimited JSON records; splits and vocabularies are plain text files.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

PAD_TOKEN, UNK_TOKEN, MASK_TOKEN, CLS_TOKEN = "[PAD]", "[UNK]", "[MASK]", "[CLS]"
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, MASK_TOKEN, CLS_TOKEN)
PAD_ID, UNK_ID, MASK_ID, CLS_ID = 0, 1, 2, 3

VALID_CODES = (1, 0, -1, 2)  # present / absent / unsure / no data

SECTION_SEPARATOR = "|"


@dataclass
class ReportRecord:
    patient_id: str
    report_id: str
    findings: str
    impression: str
    raw_labels: list[int]

    def text(self) -> str:
        """Model input: findings first, then impression."""
        return f"{self.findings} {self.impression}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ReportRecord":
        return cls(**json.loads(line))


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path) -> list[ReportRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(ReportRecord.from_json(line))
    return out


# ---------------------------------------------------------------------------
# label handling


def normalize_labels(raw) -> np.ndarray:
    """{+1 -> 1} and {0, -1 (unsure), +2 (no data) -> 0}."""
    raw = list(raw)
    for i, code in enumerate(raw):
        if code not in VALID_CODES:
            raise DataError(f"invalid label code {code!r} at position {i}")
    return np.array([1 if c == 1 else 0 for c in raw], dtype=np.int8)


def aggregate_patient_text(records: list[ReportRecord]) -> tuple[str, str]:
    """Unified findings and impression for one patient, report_id order."""
    if not records:
        raise ContractError("need at least one record to aggregate")
    ordered = sorted(records, key=lambda r: r.report_id)
    sep = f" {SECTION_SEPARATOR} "
    return (sep.join(r.findings for r in ordered),
            sep.join(r.impression for r in ordered))


def dedup(records: list[ReportRecord]) -> list[ReportRecord]:
    """Collapse exact duplicates, keeping the earliest report_id."""
    best: dict[tuple, ReportRecord] = {}
    for rec in records:
        key = (rec.patient_id, rec.findings, rec.impression, tuple(rec.raw_labels))
        kept = best.get(key)
        if kept is None or rec.report_id < kept.report_id:
            best[key] = rec
    return sorted(best.values(), key=lambda r: r.report_id)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitManifest:
    splits: dict[str, list[str]]        # split name -> report ids
    patient_split: dict[str, str]       # patient id -> split name

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"splits": self.splits, "patient_split": self.patient_split},
                      fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        with open(path) as fh:
            d = json.load(fh)
        return cls(splits=d["splits"], patient_split=d["patient_split"])

    def check_disjoint(self) -> None:
        by_split: dict[str, set] = {}
        for pid, split in self.patient_split.items():
            by_split.setdefault(split, set()).add(pid)
        names = sorted(by_split)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                inter = by_split[a] & by_split[b]
                if inter:
                    raise DataError(f"patients {sorted(inter)[:3]} in both {a} and {b}")


def split_by_patient(records: list[ReportRecord], ratios, seed: int,
                     names: tuple[str, ...] | None = None) -> SplitManifest:
    """Shuffle patients by seed and partition them by cumulative ratio."""
    ratios = tuple(float(r) for r in ratios)
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"ratios must sum to 1, got {sum(ratios)}")
    if names is None:
        names = ("train", "val", "test")[: len(ratios)]
    if len(names) != len(ratios):
        raise ContractError("one name per ratio required")
    patients = sorted({r.patient_id for r in records})
    if len(patients) < len(ratios):
        raise DataError(f"{len(patients)} patients cannot fill {len(ratios)} splits")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x5917))))
    order = [patients[i] for i in rng.permutation(len(patients))]
    bounds = [round(sum(ratios[: i + 1]) * len(order)) for i in range(len(ratios))]
    bounds[-1] = len(order)
    patient_split: dict[str, str] = {}
    start = 0
    for name, stop in zip(names, bounds):
        for pid in order[start:stop]:
            patient_split[pid] = name
        start = stop
    splits: dict[str, list[str]] = {name: [] for name in names}
    for rec in records:
        splits[patient_split[rec.patient_id]].append(rec.report_id)
    manifest = SplitManifest(splits=splits, patient_split=patient_split)
    manifest.check_disjoint()
    return manifest


# ---------------------------------------------------------------------------
# tokenization


def tokenize(text: str) -> list[str]:
    """Lowercased word/punctuation tokens."""
    import re
    return re.findall(r"\w+|[^\w\s]", text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        self.lookup = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, max_seq_len: int) -> list[int]:
        ids = [CLS_ID]
        for tok in tokenize(text):
            ids.append(self.lookup.get(tok, UNK_ID))
        return ids[:max_seq_len]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        if tokens[: len(RESERVED_TOKENS)] != list(RESERVED_TOKENS):
            raise DataError(f"vocabulary file {path} is missing reserved tokens")
        return cls(tokens=tokens)

    def content_hash(self) -> str:
        import hashlib
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]


def build_vocab(texts, max_vocab: int) -> Vocabulary:
    """Reserved tokens plus the most frequent corpus tokens, ties lexicographic."""
    if max_vocab <= len(RESERVED_TOKENS):
        raise ContractError(f"max_vocab must exceed {len(RESERVED_TOKENS)}")
    counts: Counter = Counter()
    n_texts = 0
    for text in texts:
        n_texts += 1
        counts.update(tokenize(text))
    if n_texts == 0 or not counts:
        raise DataError("empty corpus: no tokens to build a vocabulary from")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    budget = max_vocab - len(RESERVED_TOKENS)
    tokens = list(RESERVED_TOKENS) + [tok for tok, _ in ranked[:budget]]
    return Vocabulary(tokens=tokens)


def encode_records(vocab: Vocabulary, records: list[ReportRecord],
                   max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Padded token matrix [n, max_seq_len] and binary targets [n, L]."""
    n = len(records)
    if n == 0:
        raise DataError("no records to encode")
    ids = np.zeros((n, max_seq_len), dtype=np.int64)  # PAD_ID == 0
    targets = np.zeros((n, len(records[0].raw_labels)), dtype=np.float64)
    for i, rec in enumerate(records):
        row = vocab.encode(rec.text(), max_seq_len)
        ids[i, : len(row)] = row
        targets[i] = normalize_labels(rec.raw_labels)
    return ids, targets


# ---------------------------------------------------------------------------
# synthetic corpus generator

MIMIC14_LABELS = (
    "enlarged_cardiomediastinum", "cardiomegaly", "lung_opacity", "lung_lesion",
    "edema", "consolidation", "pneumonia", "atelectasis", "pneumothorax",
    "pleural_effusion", "pleural_other", "fracture", "support_devices",
    "no_finding",
)

CT18_LABELS = (
    "medical_material", "arterial_wall_calcification", "cardiomegaly",
    "pericardial_effusion", "coronary_artery_wall_calcification",
    "hiatal_hernia", "lymphadenopathy", "emphysema", "atelectasis",
    "lung_nodule", "lung_opacity", "pulmonary_fibrotic_sequela",
    "pleural_effusion", "mosaic_attenuation_pattern",
    "peribronchial_thickening", "consolidation", "bronchiectasis",
    "interlobular_septal_thickening",
)

_PHRASES = {
    "enlarged_cardiomediastinum": (
        "the cardiomediastinal silhouette is widened.",
        "mediastinal contour appears enlarged.",
        "widening of the cardiomediastinum is noted.",
        "the mediastinum remains prominent.",
    ),
    "cardiomegaly": (
        "the heart is enlarged.",
        "moderate cardiomegaly is present.",
        "cardiac silhouette enlargement persists.",
        "stable cardiomegaly on this exam.",
    ),
    "lung_opacity": (
        "patchy opacity in the right lung.",
        "hazy opacities are seen bilaterally.",
        "focal opacity projects over the lung base.",
        "scattered airspace opacity is present.",
    ),
    "lung_lesion": (
        "a rounded lesion is identified.",
        "indeterminate pulmonary lesion in the upper zone.",
        "solitary lesion noted on this study.",
        "the known lesion is unchanged.",
    ),
    "edema": (
        "interstitial edema is evident.",
        "findings suggest pulmonary edema.",
        "vascular congestion with mild edema.",
        "worsening alveolar edema pattern.",
    ),
    "consolidation": (
        "dense consolidation at the left base.",
        "lobar consolidation is demonstrated.",
        "new consolidative change is seen.",
        "patchy consolidation persists.",
    ),
    "pneumonia": (
        "findings are concerning for pneumonia.",
        "developing pneumonia cannot be excluded.",
        "multifocal pneumonia is suspected.",
        "right lower lobe pneumonia is favored.",
    ),
    "atelectasis": (
        "bibasilar atelectasis is noted.",
        "plate like atelectasis at the bases.",
        "subsegmental atelectasis persists.",
        "minor atelectatic change is seen.",
    ),
    "pneumothorax": (
        "a small apical pneumothorax is present.",
        "trace pneumothorax on the left.",
        "the small pneumothorax is unchanged.",
        "residual pneumothorax is identified.",
    ),
    "pleural_effusion": (
        "small bilateral pleural effusions.",
        "a layering pleural effusion is seen.",
        "moderate right pleural effusion persists.",
        "blunting compatible with pleural effusion.",
    ),
    "pleural_other": (
        "pleural thickening is noted.",
        "calcified pleural plaques are present.",
        "chronic pleural scarring is seen.",
        "apical pleural capping is unchanged.",
    ),
    "fracture": (
        "an acute rib fracture is identified.",
        "healing fractures of the lateral ribs.",
        "fracture of the clavicle is seen.",
        "old fracture deformity is noted.",
    ),
    "support_devices": (
        "an endotracheal tube is in place.",
        "central venous catheter tip is satisfactory.",
        "pacemaker leads are in standard position.",
        "a nasogastric tube courses below the diaphragm.",
    ),
    "no_finding": (
        "no acute cardiopulmonary process.",
        "the exam is within normal limits.",
        "clear lungs without acute abnormality.",
        "no radiographic evidence of acute disease.",
    ),
    "medical_material": (
        "surgical clips are present in the mediastinum.",
        "sternotomy wires are intact.",
        "an implanted port device is seen.",
        "surgical material in the operative bed.",
    ),
    "arterial_wall_calcification": (
        "atherosclerotic calcification of the aorta.",
        "calcified plaque along the arterial walls.",
        "aortic wall calcifications are extensive.",
        "mural vascular calcification is demonstrated.",
    ),
    "pericardial_effusion": (
        "a small pericardial effusion is present.",
        "fluid within the pericardial sac.",
        "trace pericardial effusion is seen.",
        "the pericardial effusion is stable.",
    ),
    "coronary_artery_wall_calcification": (
        "calcification of the coronary arteries.",
        "coronary artery calcifications are moderate.",
        "dense coronary calcification is noted.",
        "scattered coronary artery calcium.",
    ),
    "hiatal_hernia": (
        "a sliding hiatal hernia is seen.",
        "small hiatal hernia is present.",
        "herniation through the esophageal hiatus.",
        "the known hiatal hernia is unchanged.",
    ),
    "lymphadenopathy": (
        "mediastinal lymphadenopathy is present.",
        "enlarged hilar lymph nodes.",
        "axillary lymphadenopathy is noted.",
        "borderline enlarged mediastinal nodes.",
    ),
    "emphysema": (
        "centrilobular emphysema in the upper lobes.",
        "emphysematous change is advanced.",
        "paraseptal emphysema is present.",
        "diffuse emphysema with bullae.",
    ),
    "lung_nodule": (
        "a solid pulmonary nodule is seen.",
        "subcentimeter nodule in the right lobe.",
        "scattered micronodules are present.",
        "the dominant nodule is unchanged.",
    ),
    "pulmonary_fibrotic_sequela": (
        "fibrotic bands in the lung periphery.",
        "sequela of prior fibrotic insult.",
        "architectural distortion with fibrosis.",
        "chronic fibrotic scarring is seen.",
    ),
    "mosaic_attenuation_pattern": (
        "mosaic attenuation of the parenchyma.",
        "a mosaic perfusion pattern is seen.",
        "patchy mosaic attenuation is present.",
        "air trapping with mosaic pattern.",
    ),
    "peribronchial_thickening": (
        "peribronchial wall thickening is noted.",
        "bronchial wall thickening is diffuse.",
        "mild peribronchial cuffing.",
        "thickened bronchial walls are seen.",
    ),
    "bronchiectasis": (
        "cylindrical bronchiectasis in the lower lobes.",
        "traction bronchiectasis is present.",
        "varicoid bronchiectasis is noted.",
        "bronchiectatic change with mucus plugging.",
    ),
    "interlobular_septal_thickening": (
        "smooth interlobular septal thickening.",
        "septal lines are thickened.",
        "nodular septal thickening is seen.",
        "prominent interlobular septa.",
    ),
}

_DISTRACTORS = (
    "the visualized osseous structures are intact.",
    "midline structures are preserved.",
    "the trachea is patent and midline.",
    "imaged upper abdomen is unremarkable.",
    "soft tissues are within normal limits.",
    "mild degenerative change of the spine.",
    "the imaged airways are patent.",
    "study quality is adequate for interpretation.",
)

SCHEMAS = {"mimic14": MIMIC14_LABELS, "ct18": CT18_LABELS}


def schema_labels(schema: str) -> tuple[str, ...]:
    if schema not in SCHEMAS:
        raise ContractError(f"unknown schema {schema!r}; choose from {sorted(SCHEMAS)}")
    return SCHEMAS[schema]


def default_prevalences(schema: str) -> np.ndarray:
    labels = schema_labels(schema)
    return np.linspace(0.06, 0.20, len(labels))


def _impression_phrase(label: str, rng: np.random.Generator) -> str:
    if label == "no_finding":
        return "no acute abnormality identified."
    kw = label.replace("_", " ")
    variants = (f"{kw} is again seen.", f"persistent {kw}.")
    return variants[int(rng.integers(0, len(variants)))]


def generate_synthetic_corpus(schema: str = "mimic14", n_patients: int = 100,
                              seed: int = 0, prevalences=None,
                              uncertain_rate: float = 0.05,
                              nodata_rate: float = 0.05) -> list[ReportRecord]:
    """Patient-correlated synthetic reports with planted per-label phrases.

    Each patient draws a persistent condition set (per-label Bernoulli at the
    configured prevalence) shared by that patient's 1-3 reports; every active
    label injects 2-4 of its phrases into the findings. Uncertain (-1) and
    no-data (+2) codes appear only on inactive labels so binarized targets
    stay faithful to the planted signal.
    """
    if n_patients < 10:
        raise ContractError(f"need at least 10 patients, got {n_patients}")
    labels = schema_labels(schema)
    prev = np.asarray(prevalences if prevalences is not None
                      else default_prevalences(schema), dtype=np.float64)
    if prev.shape != (len(labels),):
        raise ContractError(f"need {len(labels)} prevalences, got shape {prev.shape}")
    binary_codes = schema == "ct18"
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xC0DE))))
    records: list[ReportRecord] = []
    for p in range(n_patients):
        pid = f"p{p:05d}"
        conditions = rng.random(len(labels)) < prev
        for j in range(int(rng.integers(1, 4))):
            sentences = [
                _DISTRACTORS[int(rng.integers(0, len(_DISTRACTORS)))]]
            for li, active in enumerate(conditions):
                if not active:
                    continue
                pool = _PHRASES[labels[li]]
                k = int(rng.integers(2, 5))
                picks = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
                sentences.extend(pool[i] for i in picks)
            order = rng.permutation(len(sentences))
            findings = " ".join(sentences[i] for i in order)
            active_idx = [i for i, a in enumerate(conditions) if a]
            if active_idx:
                mention = (active_idx if len(active_idx) <= 3 else
                           sorted(rng.choice(active_idx, size=3, replace=False).tolist()))
                impression = " ".join(_impression_phrase(labels[i], rng) for i in mention)
            else:
                impression = "no acute abnormality identified."
            codes = []
            for li, active in enumerate(conditions):
                if active:
                    codes.append(1)
                elif binary_codes:
                    codes.append(0)
                else:
                    u = rng.random()
                    if u < uncertain_rate:
                        codes.append(-1)
                    elif u < uncertain_rate + nodata_rate:
                        codes.append(2)
                    else:
                        codes.append(0)
            records.append(ReportRecord(patient_id=pid, report_id=f"{pid}-r{j}",
                                        findings=findings, impression=impression,
                                        raw_labels=codes))
    return records


# ---------------------------------------------------------------------------
# learnability gate


def learnability_check(records: list[ReportRecord], manifest: SplitManifest,
                       max_vocab: int = 1024, iters: int = 300,
                       lr: float = 25.0) -> float:
    """Weighted F1 of a bag-of-words logistic probe, train split vs held-out.

    Gate: the planted signal must be linearly recoverable (>= 0.95) before
    the corpus is used for any DP experiment.
    """
    from .metrics import confusion, weighted_f1

    by_id = {r.report_id: r for r in records}
    train = [by_id[rid] for rid in manifest.splits["train"]]
    held_name = "val" if "val" in manifest.splits and manifest.splits["val"] else "test"
    held = [by_id[rid] for rid in manifest.splits.get(held_name, [])]
    if not train or not held:
        raise DataError("learnability check needs a train and a held-out split")

    vocab = build_vocab((r.text() for r in train), max_vocab)

    def features(recs):
        x = np.zeros((len(recs), len(vocab)), dtype=np.float64)
        for i, rec in enumerate(recs):
            for tok in set(tokenize(rec.text())):
                j = vocab.lookup.get(tok)
                if j is not None:
                    x[i, j] = 1.0
        return x

    xtr = features(train)
    ytr = np.stack([normalize_labels(r.raw_labels) for r in train]).astype(np.float64)
    xte = features(held)
    yte = np.stack([normalize_labels(r.raw_labels) for r in held]).astype(np.int8)

    n, L = ytr.shape
    w = np.zeros((xtr.shape[1], L))
    b = np.zeros(L)
    vel_w = np.zeros_like(w)
    vel_b = np.zeros_like(b)
    for _ in range(iters):
        z = xtr @ w + b
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -30, 30)))
        gz = (p - ytr) / n
        gw = xtr.T @ gz
        gb = gz.sum(axis=0)
        vel_w = 0.9 * vel_w - lr * gw
        vel_b = 0.9 * vel_b - lr * gb
        w += vel_w
        b += vel_b
    preds = ((xte @ w + b) >= 0.0).astype(np.int8)
    return weighted_f1(confusion(preds, yte)).weighted_f1

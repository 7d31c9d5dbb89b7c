"""Synthetic visual dialogs with known latent structure.

Every dialog follows a chain of latent topics over rounds ``0..T`` (round 0
is the caption).  Two rounds are related exactly when they share a topic,
which gives the supervision matrix ``C``.  Tokens, visual objects and the
answer to each question are all driven by the topic, so the edge
classifier is learnable from the node features.

Vocabulary layout (ids are contiguous, in this order)::

    0 <pad>, 1 <s>, question types, answer styles, fillers,
    topic blocks (``topic_tokens`` per topic),
    concept blocks (``concept_tokens`` per concept), unused padding ids.

A concept is the answer to one (topic, question type) pair and has
``forms`` surface forms.  The question's style token picks which form is
the ground truth, so the other forms are exact synonyms that one-hot
supervision treats as wrong.  Answers on the same topic form a family.
"""

import json
from dataclasses import asdict, dataclass, fields
from functools import cached_property, lru_cache

import numpy as np

from .encoders import ANSWER_MAX, CAPTION_MAX, HISTORY_MAX, PAD_ID, QUESTION_MAX, crop_padding, history_tokens, pad_tokens
from .errors import ConfigError, ParseError, VersionError

FORMAT_NAME = "sglkt-dialogs"
FORMAT_VERSION = 1
SPLITS = {"train": 0, "val": 1, "test": 2}

SAME_CONCEPT = 1.0
SAME_FAMILY = 0.5


@dataclass(frozen=True)
class GeneratorConfig:
    vocab_size: int = 320
    topics: int = 12
    switch_prob: float = 0.3
    revisit_prob: float = 0.1
    noise: float = 0.3
    k_min: int = 10
    k_max: int = 36
    d_v: int = 64
    rounds: int = 10
    candidates: int = 100
    seed: int = 0
    qtypes: int = 4
    forms: int = 3
    fillers: int = 8
    topic_tokens: int = 8
    concept_tokens: int = 4
    flip_prob: float = 0.0
    sharpness: float = 6.0
    teacher_noise: float = 0.5

    def required_vocab(self):
        return (
            2 + self.qtypes + self.forms + self.fillers
            + self.topics * self.topic_tokens
            + self.topics * self.qtypes * self.concept_tokens
        )

    def validate(self):
        for name in ("switch_prob", "revisit_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.topics < 2:
            raise ConfigError(f"need at least 2 topics, got {self.topics}")
        if self.required_vocab() > self.vocab_size:
            raise ConfigError(
                f"{self.topics} topic blocks need {self.required_vocab()} token ids, "
                f"vocabulary has {self.vocab_size}"
            )
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError(f"bad object range [{self.k_min}, {self.k_max}]")
        if self.rounds < 1 or self.d_v < 1 or self.qtypes < 1:
            raise ConfigError("rounds, d_v and qtypes must be positive")
        if not 1 <= self.forms < self.concept_tokens:
            raise ConfigError(f"forms must be in [1, {self.concept_tokens - 1}]")
        pool = self.topics * self.qtypes * self.forms
        if not 2 <= self.candidates <= pool:
            raise ConfigError(f"candidates must be in [2, {pool}] distinct answers, got {self.candidates}")
        if self.noise < 0 or self.teacher_noise < 0:
            raise ConfigError("noise scales must be non-negative")
        if self.sharpness <= 0:
            raise ConfigError(f"teacher sharpness must be positive, got {self.sharpness}")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown generator fields {unknown}")
        return cls(**d)


@dataclass
class World:
    """Fixed vocabulary and semantics shared by every dialog of a dataset."""

    tokens: list
    qtype_ids: np.ndarray
    style_ids: np.ndarray
    filler_ids: np.ndarray
    topic_ids: np.ndarray  # (topics, topic_tokens)
    concept_ids: np.ndarray  # (concepts, concept_tokens)
    answer_map: np.ndarray  # (topics, qtypes) -> concept
    concept_topic: np.ndarray  # concept -> topic (its family)
    prototypes: np.ndarray  # (topics, d_v)

    def answer_form(self, concept, form):
        c = self.concept_ids[concept]
        return [int(c[0]), int(c[form + 1])]


@lru_cache(maxsize=16)
def build_world(cfg):
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 7919])
    tokens = ["<pad>", "<s>"]
    next_id = 2

    def block(prefix, count):
        nonlocal next_id
        ids = np.arange(next_id, next_id + count)
        tokens.extend(f"{prefix}{i}" for i in range(count))
        next_id += count
        return ids

    qtype_ids = block("qtype", cfg.qtypes)
    style_ids = block("style", cfg.forms)
    filler_ids = block("fill", cfg.fillers)
    topic_ids = np.stack([block(f"topic{t}_", cfg.topic_tokens) for t in range(cfg.topics)])
    n_concepts = cfg.topics * cfg.qtypes
    concept_ids = np.stack([block(f"ans{c}_", cfg.concept_tokens) for c in range(n_concepts)])
    tokens.extend(f"<unused{i}>" for i in range(cfg.vocab_size - next_id))

    answer_map = rng.permutation(n_concepts).reshape(cfg.topics, cfg.qtypes)
    concept_topic = np.empty(n_concepts, dtype=np.int64)
    concept_topic[answer_map.reshape(-1)] = np.repeat(np.arange(cfg.topics), cfg.qtypes)
    prototypes = rng.standard_normal((cfg.topics, cfg.d_v))
    return World(tokens, qtype_ids, style_ids, filler_ids, topic_ids, concept_ids, answer_map, concept_topic, prototypes)


@dataclass
class DialogInstance:
    seed: int
    caption: np.ndarray  # (CAPTION_MAX,)
    questions: np.ndarray  # (T, QUESTION_MAX)
    answers: np.ndarray  # (T, ANSWER_MAX)
    visual: np.ndarray  # (K, d_v)
    candidates: np.ndarray  # (T, N, ANSWER_MAX)
    gt_index: np.ndarray  # (T,)
    relevance: np.ndarray  # (T, N)
    C: np.ndarray  # (T+1, T+1)
    topics: np.ndarray  # (T+1,)
    teacher: np.ndarray = None  # (T, N)

    @property
    def rounds(self):
        return self.questions.shape[0]

    @cached_property
    def node_tokens(self):
        """``(2T, L)`` token ids: history rounds 0..T-1 (caption first), then questions 1..T."""
        Tn = self.rounds
        hist = [pad_tokens(self.caption, HISTORY_MAX)]
        hist += [history_tokens(self.questions[r], self.answers[r]) for r in range(Tn - 1)]
        ques = [pad_tokens(q, HISTORY_MAX) for q in self.questions]
        return crop_padding(np.stack(hist + ques))

    @cached_property
    def unique_candidates(self):
        """Distinct candidate sequences ``(U, L)`` and the ``(T, N)`` index of each candidate into them."""
        Tn, N, L = self.candidates.shape
        rows = np.ascontiguousarray(self.candidates.reshape(Tn * N, L))
        keys = rows.view(np.dtype((np.void, rows.dtype.itemsize * L))).reshape(-1)
        _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        return rows[first], inverse.reshape(Tn, N)

    def to_record(self):
        """JSON-ready dict; token sequences are stored without their padding."""
        rec = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in TOKEN_WIDTHS:
                rec[f.name] = _strip(v)
            else:
                rec[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return rec

    @classmethod
    def from_record(cls, rec):
        int_fields = ("caption", "questions", "answers", "candidates", "gt_index", "topics")
        kw = {}
        for f in fields(cls):
            if f.name not in rec:
                if f.name == "teacher":
                    continue
                raise KeyError(f.name)
            v = rec[f.name]
            if f.name == "seed":
                kw[f.name] = int(v)
            elif v is None:
                kw[f.name] = None
            elif f.name in TOKEN_WIDTHS:
                kw[f.name] = _repad(v, TOKEN_WIDTHS[f.name])
            else:
                kw[f.name] = np.array(v, dtype=np.int64 if f.name in int_fields else np.float64)
        inst = cls(**kw)
        inst.check()
        return inst

    def check(self):
        Tn = self.questions.shape[0]
        N = self.candidates.shape[1]
        if self.answers.shape[0] != Tn or self.candidates.shape[0] != Tn:
            raise ValueError("round counts disagree")
        if self.gt_index.shape != (Tn,) or self.relevance.shape != (Tn, N):
            raise ValueError("ground truth or relevance has the wrong shape")
        if self.C.shape != (Tn + 1, Tn + 1) or self.visual.ndim != 2:
            raise ValueError("C or visual block has the wrong shape")
        if np.any(self.gt_index < 0) or np.any(self.gt_index >= N):
            raise ValueError("ground-truth index out of range")
        if self.teacher is not None and self.teacher.shape != (Tn, N):
            raise ValueError("teacher scores have the wrong shape")
        return self


TOKEN_WIDTHS = {"caption": CAPTION_MAX, "questions": QUESTION_MAX, "answers": ANSWER_MAX, "candidates": ANSWER_MAX}


def _strip(ids):
    if ids.ndim == 1:
        return [int(i) for i in ids if i != PAD_ID]
    return [_strip(row) for row in ids]


def _repad(v, width):
    if not v or not isinstance(v[0], list):
        if len(v) > width:
            raise ValueError(f"token sequence longer than {width}")
        return pad_tokens(v, width)
    return np.stack([_repad(row, width) for row in v])


def dialog_seed(seed, split, index):
    """Per-dialog seed derived from (dataset seed, split, index)."""
    code = SPLITS[split] if isinstance(split, str) else int(split)
    return int(np.random.SeedSequence([seed, code, index]).generate_state(1, np.uint64)[0] >> 1)


def topic_chain(rng, cfg):
    """Topics of rounds 0..T under switch/revisit dynamics."""
    chain = [int(rng.integers(cfg.topics))]
    for _ in range(cfg.rounds):
        cur = chain[-1]
        if rng.random() >= cfg.switch_prob:
            chain.append(cur)
            continue
        seen = sorted(set(chain) - {cur})
        fresh = [t for t in range(cfg.topics) if t not in set(chain)]
        if seen and (rng.random() < cfg.revisit_prob or not fresh):
            chain.append(int(rng.choice(seen)))
        elif fresh:
            chain.append(int(rng.choice(fresh)))
        else:
            chain.append(int(rng.choice([t for t in range(cfg.topics) if t != cur])))
    return np.array(chain, dtype=np.int64)


def supervision(topics, flip_prob=0.0, rng=None):
    """C_ij = 1 iff topics i and j match (i < j), optionally flipped with ``flip_prob``."""
    n = topics.size
    support = np.triu(np.ones((n, n), dtype=bool), k=1)
    C = ((topics[:, None] == topics[None, :]) & support).astype(np.float64)
    if flip_prob > 0:
        flips = (rng.random((n, n)) < flip_prob) & support
        C[flips] = 1.0 - C[flips]
    return C


def _sentence(rng, world, topic, lo, hi, filler_prob=0.25):
    words = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        if rng.random() < filler_prob:
            words.append(int(rng.choice(world.filler_ids)))
        else:
            words.append(int(rng.choice(world.topic_ids[topic])))
    return words


def _candidate_pool(cfg, world):
    n_concepts = world.concept_ids.shape[0]
    return [(c, f) for c in range(n_concepts) for f in range(cfg.forms)]


def generate_dialog(cfg, seed):
    cfg.validate()
    world = build_world(cfg)
    rng = np.random.default_rng(seed)
    topics = topic_chain(rng, cfg)
    C = supervision(topics, cfg.flip_prob, rng)
    caption = pad_tokens(_sentence(rng, world, topics[0], 4, 8), CAPTION_MAX)

    pool = _candidate_pool(cfg, world)
    pool_index = {p: i for i, p in enumerate(pool)}
    Tn, N = cfg.rounds, cfg.candidates
    questions = np.zeros((Tn, QUESTION_MAX), dtype=np.int64)
    answers = np.zeros((Tn, ANSWER_MAX), dtype=np.int64)
    candidates = np.zeros((Tn, N, ANSWER_MAX), dtype=np.int64)
    gt_index = np.zeros(Tn, dtype=np.int64)
    relevance = np.zeros((Tn, N))
    for r in range(Tn):
        topic = int(topics[r + 1])
        qtype = int(rng.integers(cfg.qtypes))
        style = int(rng.integers(cfg.forms))
        words = [int(world.qtype_ids[qtype])] + _sentence(rng, world, topic, 2, 4) + [int(world.style_ids[style])]
        questions[r] = pad_tokens(words, QUESTION_MAX)
        concept = int(world.answer_map[topic, qtype])
        answers[r] = pad_tokens(world.answer_form(concept, style), ANSWER_MAX)

        gt = pool_index[(concept, style)]
        related = [pool_index[(c, f)] for c in world.answer_map[topic] for f in range(cfg.forms)]
        related = [i for i in related if i != gt]
        rest = np.array([i for i in range(len(pool)) if i != gt and i not in set(related)])
        if len(related) >= N - 1:
            chosen = list(rng.choice(related, size=N - 1, replace=False))
        else:
            chosen = related + list(rng.choice(rest, size=N - 1 - len(related), replace=False))
        chosen = [gt] + [int(i) for i in chosen]
        order = rng.permutation(N)
        chosen = [chosen[i] for i in order]
        gt_index[r] = int(np.flatnonzero(order == 0)[0])
        for n, idx in enumerate(chosen):
            c, f = pool[idx]
            candidates[r, n] = pad_tokens(world.answer_form(c, f), ANSWER_MAX)
            if c == concept:
                relevance[r, n] = SAME_CONCEPT
            elif world.concept_topic[c] == topic:
                relevance[r, n] = SAME_FAMILY

    K = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    present = np.unique(topics)
    obj_topics = rng.choice(present, size=K)
    visual = world.prototypes[obj_topics] + cfg.noise * rng.standard_normal((K, cfg.d_v))
    inst = DialogInstance(seed, caption, questions, answers, visual, candidates, gt_index, relevance, C, topics)
    inst.teacher = generate_teacher_scores(inst, cfg.sharpness, cfg.teacher_noise)
    return inst


def semantic_similarity(inst):
    """1 for the ground-truth concept, 0.5 for same-topic answers, 0 otherwise."""
    return inst.relevance.copy()


def generate_teacher_scores(inst, sharpness, noise=0.0, seed=None):
    """Sigmoid-shaped teacher scores of candidate-to-ground-truth similarity.

    The logit is ``sharpness * (sim - 0.75)`` plus Gaussian noise, so synonyms
    of the ground truth score high, same-topic answers low and the rest near 0.
    The ground truth itself is scored like any synonym and usually stays below 1.
    """
    if sharpness <= 0:
        raise ConfigError(f"teacher sharpness must be positive, got {sharpness}")
    rng = np.random.default_rng([inst.seed if seed is None else seed, 104729])
    sim = semantic_similarity(inst)
    logits = sharpness * (sim - 0.75) + noise * rng.standard_normal(sim.shape)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-logits))


def generate_split(cfg, split, count, start=0):
    return [generate_dialog(cfg, dialog_seed(cfg.seed, split, i)) for i in range(start, start + count)]


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def write_dataset(instances, path, cfg=None, split=None):
    """One JSON header line, then one JSON record per dialog."""
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION}
    if cfg is not None:
        header["generator"] = asdict(cfg)
        header["vocab"] = build_world(cfg).tokens
    if split is not None:
        header["split"] = split
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for inst in instances:
            fh.write(json.dumps(inst.to_record()) + "\n")


def read_header(line):
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ParseError("not a dialog dataset (missing format header)")
    if header.get("version") != FORMAT_VERSION:
        raise VersionError(f"dataset version {header.get('version')} is not supported (expected {FORMAT_VERSION})")
    return header


def read_dataset(path, with_header=False):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise ParseError(f"{path}: empty dataset file")
        header = read_header(first)
        instances = []
        for index, line in enumerate(fh):
            try:
                instances.append(DialogInstance.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{type(exc).__name__}: {exc}", record=index) from exc
    return (instances, header) if with_header else instances


@dataclass
class Dataset:
    """Dialogs plus what a model needs to know about them."""

    dialogs: list
    vocab_size: int
    d_v: int
    generator: GeneratorConfig = None
    split: str = None

    def __len__(self):
        return len(self.dialogs)

    @classmethod
    def generate(cls, cfg, split, count, start=0):
        return cls(generate_split(cfg, split, count, start), cfg.vocab_size, cfg.d_v, cfg, split)

    @classmethod
    def load(cls, path):
        dialogs, header = read_dataset(path, with_header=True)
        gen = header.get("generator")
        cfg = GeneratorConfig.from_dict(gen) if gen else None
        if cfg is not None:
            vocab_size, d_v = cfg.vocab_size, cfg.d_v
        elif "vocab" in header:
            vocab_size = len(header["vocab"])
            d_v = dialogs[0].visual.shape[1] if dialogs else 0
        else:
            raise ParseError(f"{path}: header has neither generator config nor vocabulary")
        return cls(dialogs, vocab_size, d_v, cfg, header.get("split"))

    def save(self, path):
        write_dataset(self.dialogs, path, self.generator, self.split)

"""Synthetic multi-session phoneme recordings with controllable cross-session drift.

Each session applies a linear mixing ``A_s = I + drift * s * R``, a bias
``b_s`` and a per-channel gain to piecewise-constant phoneme prototypes:

    frame_t = gain_s * (A_s @ mu[k(t)] + b_s) + noise

``R`` (unit Frobenius norm), the bias direction and the gain direction are
drawn once per corpus, so drift grows smoothly with the session index.
"""
from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

SPLITS = ("source", "target", "validation", "test")
SYLLABLES = ("ba", "di", "ku", "mo", "ne", "pa", "ri", "so", "tu", "ve",
             "ga", "hi", "jo", "lu", "we", "yo", "za", "fe", "ci", "xu")
MAX_RESAMPLES = 100


class GenerationError(RuntimeError):
    pass


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent generator named by ``keys`` (ints or strings) under ``seed``."""
    words = [int(seed)]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.default_rng(words)


def round_sig(x, digits: int = 9) -> np.ndarray:
    """Round to ``digits`` significant decimal digits (the on-disk precision)."""
    x = np.asarray(x, dtype=np.float64)
    flat = [float(f"{v:.{digits}g}") for v in x.ravel()]
    return np.array(flat, dtype=np.float64).reshape(x.shape)


# ----------------------------------------------------------------- inventory

@dataclass
class PhonemeInventory:
    K: int
    prototypes: np.ndarray  # (K, c); row k-1 belongs to phoneme id k

    @property
    def symbols(self) -> list[int]:
        return list(range(self.K + 1))

    @property
    def channels(self) -> int:
        return self.prototypes.shape[1]

    def prototype(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.K:
            raise ValueError(f"phoneme id {k} outside 1..{self.K}")
        return self.prototypes[k - 1]

    def min_distance(self) -> float:
        P = self.prototypes
        d = np.sqrt(((P[:, None, :] - P[None, :, :]) ** 2).sum(-1))
        d[np.diag_indices(self.K)] = np.inf
        return float(d.min())

    def validate(self, min_dist: float = 0.0):
        if self.prototypes.shape[0] != self.K:
            raise ValueError("prototype count does not match K")
        if not self.min_distance() > min_dist:
            raise ValueError("prototypes are not sufficiently distinct")


def make_inventory(K: int, c: int, rng: np.random.Generator, min_dist: float = 0.75,
                   scale: float = 1.0) -> PhonemeInventory:
    """Draw ``K`` prototypes from N(0, scale^2 I_c) with pairwise distance > min_dist*scale."""
    if K < 2 or c < 2:
        raise ValueError(f"need K >= 2 and c >= 2, got K={K}, c={c}")
    for _ in range(MAX_RESAMPLES):
        inv = PhonemeInventory(K, rng.normal(0.0, scale, size=(K, c)))
        if inv.min_distance() > min_dist * scale:
            return inv
    raise GenerationError(
        f"could not place {K} prototypes in {c} channels with separation {min_dist * scale:g} "
        f"after {MAX_RESAMPLES} attempts")


# ------------------------------------------------------------------- lexicon

def make_lexicon(inventory: PhonemeInventory, n_words: int, word_len: tuple[int, int],
                 rng: np.random.Generator) -> dict[str, list[int]]:
    """Random words with unique, blank-free pronunciations."""
    lo, hi = word_len
    lex: dict[str, list[int]] = {}
    seen = set()
    attempts = 0
    while len(lex) < n_words:
        attempts += 1
        if attempts > 1000 * n_words:
            raise GenerationError(f"cannot draw {n_words} distinct pronunciations")
        pron = tuple(int(k) for k in rng.integers(1, inventory.K + 1, size=rng.integers(lo, hi + 1)))
        if pron in seen:
            continue
        seen.add(pron)
        name = "".join(SYLLABLES[(k - 1) % len(SYLLABLES)] for k in pron)
        if name in lex:
            name = f"{name}{len(lex)}"
        lex[name] = list(pron)
    return dict(sorted(lex.items()))


def make_grammar(words: list[str], rng: np.random.Generator, fanout: int = 3) -> dict:
    """Sparse word-bigram chain: each word prefers ``fanout`` successors."""
    succ = {}
    for w in ["<s>"] + list(words):
        picks = rng.choice(len(words), size=min(fanout, len(words)), replace=False)
        succ[w] = [words[i] for i in sorted(picks)]
    return succ


def sample_sentence(inventory: PhonemeInventory, len_range: tuple[int, int],
                    lexicon: dict[str, list[int]], rng: np.random.Generator,
                    grammar: dict | None = None, stickiness: float = 0.85):
    """Draw a word sequence and its concatenated pronunciation.

    With a ``grammar`` the next word is one of the preferred successors with
    probability ``stickiness`` and uniform over the lexicon otherwise.
    """
    if not lexicon:
        raise ValueError("empty lexicon")
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad sentence length range {len_range}")
    vocab = sorted(lexicon)
    n = int(rng.integers(lo, hi + 1))
    out = []
    prev = "<s>"
    for _ in range(n):
        if grammar is not None and rng.random() < stickiness:
            choices = grammar[prev]
        else:
            choices = vocab
        w = choices[int(rng.integers(len(choices)))]
        out.append(w)
        prev = w
    phonemes = [k for w in out for k in lexicon[w]]
    for k in phonemes:
        inventory.prototype(k)
    return out, phonemes


# --------------------------------------------------------------------- drift

@dataclass
class DriftBasis:
    mix: np.ndarray      # R, unit Frobenius norm
    offset: np.ndarray   # unit bias direction
    gain: np.ndarray     # unit gain direction


def make_drift_basis(c: int, rng: np.random.Generator, rank: int | None = None) -> DriftBasis:
    rank = c if rank is None else max(1, min(rank, c))
    U = rng.normal(size=(c, rank))
    W = rng.normal(size=(rank, c))
    R = U @ W
    R /= np.linalg.norm(R)
    u = rng.normal(size=c)
    g = rng.normal(size=c)
    return DriftBasis(R, u / np.linalg.norm(u), g / np.linalg.norm(g))


@dataclass
class SessionParams:
    session_index: int
    mix: np.ndarray
    offset: np.ndarray
    gain: np.ndarray
    noise_sd: float
    speed_range: tuple[float, float]

    def validate(self):
        if abs(np.linalg.det(self.mix)) <= 1e-6:
            raise ValueError("session mixing matrix is singular")
        lo, hi = self.speed_range
        if not 0.5 < lo <= hi < 3.0:
            raise ValueError(f"speed range {self.speed_range} outside (0.5, 3.0)")


def make_session_params(session_index: int, drift_strength: float, rng: np.random.Generator,
                        channels: int = None, basis: DriftBasis | None = None,
                        offset_scale: float = 1.0, gain_scale: float = 0.0,
                        noise_sd: float = 0.3, speed_range=(0.9, 1.1),
                        speed_drift: float = 0.0) -> SessionParams:
    """Parameters of session ``session_index``; ||A_s - I||_F = drift * index."""
    if drift_strength < 0:
        raise ValueError("drift_strength must be >= 0")
    if basis is None:
        basis = make_drift_basis(channels, rng)
    c = basis.mix.shape[0]
    t = drift_strength * session_index
    for _ in range(MAX_RESAMPLES):
        A = np.eye(c) + t * basis.mix
        if abs(np.linalg.det(A)) > 1e-6:
            break
        basis = dataclasses.replace(basis, mix=make_drift_basis(c, rng).mix)
    else:
        raise GenerationError("could not draw a nonsingular mixing matrix")
    gain = np.maximum(1.0 + t * gain_scale * basis.gain, 0.1)
    f = 1.0 + speed_drift * session_index
    lo = min(max(speed_range[0] * f, 0.51), 2.99)
    hi = min(max(speed_range[1] * f, lo), 2.99)
    p = SessionParams(session_index, A, t * offset_scale * basis.offset, gain,
                      float(noise_sd), (lo, hi))
    p.validate()
    return p


# --------------------------------------------------------------------- trials

@dataclass
class Trial:
    features: np.ndarray           # (T, c)
    labels: list[int]
    session_id: int
    split: str
    transcript: list[str] = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.features.shape[0]

    def stripped(self) -> "Trial":
        return dataclasses.replace(self, labels=[])


def render_trial(phonemes, params: SessionParams, inventory: PhonemeInventory,
                 rng: np.random.Generator, dur_range=(3.0, 6.0), d_min: int = 2,
                 speed: float | None = None, durations=None, split: str = "source",
                 transcript=()) -> Trial:
    """Emit each phoneme's session-transformed prototype for its duration.

    ``durations`` (frames at speed 1) may be supplied to hold the timing fixed
    across calls; otherwise they are drawn from ``dur_range``.
    """
    if len(phonemes) == 0:
        raise ValueError("empty phoneme sequence")
    d_min = max(2, int(d_min))
    if speed is None:
        speed = rng.uniform(*params.speed_range)
    if durations is None:
        durations = rng.uniform(dur_range[0], dur_range[1], size=len(phonemes))
    counts = [max(d_min, int(round(d * speed))) for d in durations]
    emit = np.stack([params.mix @ inventory.prototype(k) + params.offset for k in phonemes])
    emit *= params.gain
    frames = np.repeat(emit, counts, axis=0)
    if params.noise_sd > 0:
        frames = frames + rng.normal(0.0, params.noise_sd, size=frames.shape)
    return Trial(frames, [int(k) for k in phonemes], params.session_index, split, list(transcript))


# --------------------------------------------------------------------- corpus

@dataclass
class GenConfig:
    n_phonemes: int = 8
    channels: int = 16
    n_words: int = 24
    word_len: tuple = (1, 3)
    sentence_len: tuple = (1, 3)
    n_source: int = 3
    n_target: int = 2
    n_test: int = 1
    trials_per_session: int = 40
    target_fraction: float = 0.5
    drift_strength: float = 0.1
    drift_rank: int = 0           # 0 = full rank
    offset_scale: float = 1.0
    gain_scale: float = 0.0
    noise_sd: float = 0.3
    prototype_scale: float = 1.0
    min_proto_dist: float = 0.75
    dur_range: tuple = (3.0, 6.0)
    d_min: int = 2
    speed_range: tuple = (0.9, 1.1)
    speed_drift: float = 0.0
    grammar_fanout: int = 3
    lm_sentences: int = 2000
    seed: int = 0

    def validate(self):
        if min(self.n_source, self.n_target, self.n_test) < 1:
            raise ValueError("partition counts n_source, n_target, n_test must all be >= 1")
        if self.trials_per_session < 1:
            raise ValueError("trials_per_session must be >= 1")
        if not 0.0 < self.target_fraction < 1.0:
            raise ValueError("target_fraction must be in (0, 1)")
        if self.drift_strength < 0:
            raise ValueError("drift_strength must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise KeyError(f"unknown datagen keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw).validate()


@dataclass
class Session:
    params: SessionParams
    trials: list[Trial]

    @property
    def index(self) -> int:
        return self.params.session_index


@dataclass
class Corpus:
    config: GenConfig
    inventory: PhonemeInventory
    lexicon: dict[str, list[int]]
    sessions: list[Session]
    partition: dict[str, list[int]]
    lm_sentences: list[list[str]] = field(default_factory=list)

    @property
    def rng_seed(self) -> int:
        return self.config.seed

    @property
    def vocab_size(self) -> int:
        return self.inventory.K + 1

    def session(self, idx: int) -> Session:
        for s in self.sessions:
            if s.index == idx:
                return s
        raise KeyError(f"no session {idx}")

    def trials(self, split: str, sessions=None) -> list[Trial]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        out = []
        for s in self.sessions:
            if sessions is not None and s.index not in sessions:
                continue
            out.extend(t for t in s.trials if t.split == split)
        return out

    def training_view(self) -> "TrainingView":
        return TrainingView(self)


class TrainingView:
    """What the trainer may see: labeled source and validation, unlabeled target.

    Test sessions are not reachable from the view at all.
    """

    def __init__(self, corpus: Corpus):
        self.source = corpus.trials("source")
        self.target = [t.stripped() for t in corpus.trials("target")]
        self.validation = corpus.trials("validation")
        self.source_sessions = list(corpus.partition["source"])
        self.target_sessions = list(corpus.partition["target"])
        self.vocab_size = corpus.vocab_size
        self.channels = corpus.inventory.channels


def generate_corpus(cfg: GenConfig) -> Corpus:
    cfg.validate()
    seed = cfg.seed
    inventory = make_inventory(cfg.n_phonemes, cfg.channels, substream(seed, "inventory"),
                               cfg.min_proto_dist, cfg.prototype_scale)
    lexicon = make_lexicon(inventory, cfg.n_words, cfg.word_len, substream(seed, "lexicon"))
    grammar = make_grammar(sorted(lexicon), substream(seed, "grammar"), cfg.grammar_fanout)
    basis = make_drift_basis(cfg.channels, substream(seed, "drift"), cfg.drift_rank or None)

    n_total = cfg.n_source + cfg.n_target + cfg.n_test
    partition = {
        "source": list(range(cfg.n_source)),
        "target": list(range(cfg.n_source, cfg.n_source + cfg.n_target)),
        "test": list(range(cfg.n_source + cfg.n_target, n_total)),
    }
    role = {i: r for r, ids in partition.items() for i in ids}
    n_unlabeled = int(np.ceil(cfg.target_fraction * cfg.trials_per_session))
    sessions = []
    for s in range(n_total):
        params = make_session_params(
            s, cfg.drift_strength, substream(seed, "session", s), basis=basis,
            offset_scale=cfg.offset_scale, gain_scale=cfg.gain_scale, noise_sd=cfg.noise_sd,
            speed_range=cfg.speed_range, speed_drift=cfg.speed_drift)
        trials = []
        for i in range(cfg.trials_per_session):
            rng = substream(seed, "trial", s, i)
            words, phon = sample_sentence(inventory, cfg.sentence_len, lexicon, rng, grammar)
            if role[s] == "target":
                split = "target" if i < n_unlabeled else "validation"
            else:
                split = role[s]
            tr = render_trial(phon, params, inventory, rng, cfg.dur_range, cfg.d_min,
                              split=split, transcript=words)
            tr.features = round_sig(tr.features)
            trials.append(tr)
        sessions.append(Session(params, trials))

    lm_rng = substream(seed, "lm_corpus")
    lm_sents = [sample_sentence(inventory, cfg.sentence_len, lexicon, lm_rng, grammar)[0]
                for _ in range(cfg.lm_sentences)]
    return Corpus(cfg, inventory, lexicon, sessions, partition, lm_sents)


def shifted_sessions(corpus: Corpus, n_sessions: int, drift_strength: float,
                     key: str = "shifted", trials_per_session: int | None = None) -> list[Session]:
    """Unlabeled-split sessions appended after the corpus, drifting along a fresh direction.

    Session ``j`` (0-based) uses ``A = I + drift_strength * (j + 1) * R'`` with
    ``R'`` drawn independently of the corpus drift basis, so the shift is not
    an extrapolation of anything seen in training.  Sentences come from the
    corpus grammar and lexicon; all trials are labeled ``split="test"``.
    """
    cfg = corpus.config
    seed = cfg.seed
    grammar = make_grammar(sorted(corpus.lexicon), substream(seed, "grammar"), cfg.grammar_fanout)
    basis = make_drift_basis(cfg.channels, substream(seed, key, "drift"), cfg.drift_rank or None)
    n_trials = trials_per_session or cfg.trials_per_session
    first = max(s.index for s in corpus.sessions) + 1
    out = []
    for j in range(n_sessions):
        params = make_session_params(
            j + 1, drift_strength, substream(seed, key, "session", j), basis=basis,
            offset_scale=cfg.offset_scale, gain_scale=cfg.gain_scale, noise_sd=cfg.noise_sd,
            speed_range=cfg.speed_range)
        params = dataclasses.replace(params, session_index=first + j)
        trials = []
        for i in range(n_trials):
            rng = substream(seed, key, "trial", j, i)
            words, phon = sample_sentence(corpus.inventory, cfg.sentence_len, corpus.lexicon,
                                          rng, grammar)
            tr = render_trial(phon, params, corpus.inventory, rng, cfg.dur_range, cfg.d_min,
                              split="test", transcript=words)
            tr.features = round_sig(tr.features)
            trials.append(tr)
        out.append(Session(params, trials))
    return out


# ------------------------------------------------------------------------- IO

def _fmt(v: float) -> str:
    return f"{v:.9g}"


def trial_record(t: Trial) -> str:
    feats = ",".join(_fmt(v) for v in t.features.ravel())
    labels = json.dumps([int(k) for k in t.labels])
    return (f'{{"features":[{feats}],"dims":[{t.features.shape[0]},{t.features.shape[1]}],'
            f'"labels":{labels},"transcript":{json.dumps(" ".join(t.transcript))},'
            f'"split":"{t.split}"}}')


def write_corpus(corpus: Corpus, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "seed": corpus.config.seed,
        "partition": corpus.partition,
        "layout": {"source": "source (train)", "target": "unlabeled target",
                   "validation": "labeled validation (target sessions)", "test": "unseen test"},
        "datagen": corpus.config.to_dict(),
        "inventory": {"K": corpus.inventory.K,
                      "prototypes": [[float(_fmt(v)) for v in row] for row in corpus.inventory.prototypes]},
        "sessions": [{"index": s.index, "n_trials": len(s.trials),
                      "speed_range": [float(_fmt(v)) for v in s.params.speed_range]}
                     for s in corpus.sessions],
    }
    (path / "meta").write_text(tomli_w.dumps(meta))
    with open(path / "lexicon.txt", "w") as f:
        for w, pron in corpus.lexicon.items():
            f.write(f"{w}\t{' '.join(map(str, pron))}\n")
    with open(path / "lm_corpus.txt", "w") as f:
        for sent in corpus.lm_sentences:
            f.write(" ".join(sent) + "\n")
    for s in corpus.sessions:
        with open(path / f"session_{s.index}.jsonl", "w") as f:
            for t in s.trials:
                f.write(trial_record(t) + "\n")
    return path


def read_lexicon(path) -> dict[str, list[int]]:
    lex = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        w, pron = line.split("\t")
        lex[w] = [int(k) for k in pron.split()]
    return lex


def read_corpus(path) -> Corpus:
    """Load a corpus directory; session drift parameters are regenerated from the config."""
    path = Path(path)
    if not (path / "meta").exists():
        raise FileNotFoundError(f"{path} is not a corpus directory (no meta file)")
    meta = tomli.loads((path / "meta").read_text())
    cfg = GenConfig.from_dict(meta["datagen"])
    inv = PhonemeInventory(meta["inventory"]["K"], np.array(meta["inventory"]["prototypes"]))
    lexicon = read_lexicon(path / "lexicon.txt")
    lm_sents = [l.split() for l in (path / "lm_corpus.txt").read_text().splitlines() if l.strip()]
    basis = make_drift_basis(cfg.channels, substream(cfg.seed, "drift"), cfg.drift_rank or None)
    sessions = []
    for s in meta["sessions"]:
        idx = s["index"]
        params = make_session_params(
            idx, cfg.drift_strength, substream(cfg.seed, "session", idx), basis=basis,
            offset_scale=cfg.offset_scale, gain_scale=cfg.gain_scale, noise_sd=cfg.noise_sd,
            speed_range=cfg.speed_range, speed_drift=cfg.speed_drift)
        trials = []
        for line in (path / f"session_{idx}.jsonl").read_text().splitlines():
            rec = json.loads(line)
            feats = np.array(rec["features"], dtype=np.float64).reshape(rec["dims"])
            trials.append(Trial(feats, rec["labels"], idx, rec["split"], rec["transcript"].split()))
        sessions.append(Session(params, trials))
    return Corpus(cfg, inv, lexicon, sessions, {k: list(v) for k, v in meta["partition"].items()},
                  lm_sents)

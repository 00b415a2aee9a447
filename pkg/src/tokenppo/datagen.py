"""Synthetic query-generation corpus: episodes, annotation, tokenization, batching.

The corpus stands in for real search-session logs. Each episode is one user's
interaction history plus a candidate query response. Relevance ground truth is
exact: a word is relevant iff its topic stem is mentioned anywhere in the
user's history. A deterministic rule therefore replaces the expensive LLM
annotator, which makes oracle-based testing possible.

Reward categories are three-way:
    0  non-reward / masked (separators, stopwords, padding)
    1  irrelevant content word
    2  relevant content word
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

CAT_MASKED = 0
CAT_IRRELEVANT = 1
CAT_RELEVANT = 2
CATEGORIES = (CAT_MASKED, CAT_IRRELEVANT, CAT_RELEVANT)

HISTORY_KINDS = ("search", "click", "purchase", "visit")

PAD_TOKEN = "<pad>"
EOS_TOKEN = "</s>"

PAD_ID = 0
EOS_ID = 1

# Word boundaries live in the vocabulary, not in separator tokens: the first
# chunk of every word is stored with this marker (the sentencepiece idiom),
# so a generated token stream always decodes into delimited words.
WORD_START = "▁"

_DIGITS = "0123456789"


class DatagenError(ValueError):
    """Invalid input to a corpus operation."""


class ParseError(DatagenError):
    """A dataset line could not be parsed; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class AnnotationError(DatagenError):
    """The sentence reward is undefined (no content words in the response)."""


class OutOfVocabError(DatagenError):
    """A token or id falls outside the vocabulary."""


# ---------------------------------------------------------------------------
# Core record types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WordAnnotation:
    """A single response word with its reward category."""

    word: str
    category: int

    def __post_init__(self):
        if not self.word or any(c.isspace() for c in self.word):
            raise DatagenError(f"annotated word must be non-empty, no whitespace: {self.word!r}")
        if self.category not in CATEGORIES:
            raise DatagenError(f"category must be 0, 1 or 2, got {self.category}")


@dataclass(frozen=True)
class HistoryEvent:
    kind: str
    text: str

    def __post_init__(self):
        if self.kind not in HISTORY_KINDS:
            raise DatagenError(f"unknown history kind {self.kind!r}")


@dataclass(frozen=True)
class EpisodeRecord:
    """One user's history events plus an annotated response.

    ``sentence_reward`` is a whole-response judgment and is never masked,
    so it takes values in {1, 2} only.
    """

    id: str
    history: tuple[HistoryEvent, ...]
    prompt_words: tuple[str, ...]
    response_words: tuple[WordAnnotation, ...]
    sentence_reward: int
    target_queries: tuple[str, ...] = ()

    def __post_init__(self):
        if self.sentence_reward not in (CAT_IRRELEVANT, CAT_RELEVANT):
            raise DatagenError(f"sentence_reward must be 1 or 2, got {self.sentence_reward}")
        if not self.history:
            raise DatagenError("history must be non-empty")


@dataclass(frozen=True)
class Tokenizer:
    """Toy tokenizer: splits a word into fixed-length character chunks.

    Lossless by construction: concatenating the chunks restores the word.
    Two tokenizers with different ``chunk_len`` are guaranteed to disagree
    on any word longer than min(chunk_len), which is all the pipeline needs
    from "different models use different tokenizers".
    """

    name: str
    chunk_len: int

    def __post_init__(self):
        if self.chunk_len < 1:
            raise DatagenError(f"chunk_len must be positive, got {self.chunk_len}")

    def tokenize(self, word: str) -> list[str]:
        return tokenize_word(word, self)

    def detokenize(self, tokens: list[str]) -> str:
        return "".join(tokens)


TOKENIZERS = {
    "chunk2": Tokenizer("chunk2", 2),
    "chunk3": Tokenizer("chunk3", 3),
    "chunk5": Tokenizer("chunk5", 5),
}


def get_tokenizer(name: str) -> Tokenizer:
    if name not in TOKENIZERS:
        raise DatagenError(f"unknown tokenizer {name!r}; known: {sorted(TOKENIZERS)}")
    return TOKENIZERS[name]


@dataclass(frozen=True)
class AnnotatorConfig:
    """Rule-oracle annotator settings.

    ``tau`` is the relevant fraction (among content words) at or above which
    the whole response is judged relevant.
    """

    stopwords: frozenset[str] = frozenset({",", ".", "and", "the"})
    tau: float = 0.5


@dataclass(frozen=True)
class CorpusConfig:
    topics: tuple[str, ...] = ("planet", "orchid", "copper", "falcon", "meadow", "quartz")
    words_per_topic: int = 4
    min_history: int = 1
    max_history: int = 8
    max_interests: int = 2
    min_response_words: int = 3
    max_response_words: int = 5
    on_topic_rate: float = 0.7
    separator_rate: float = 0.15
    fragment_rate: float = 0.12
    target_query_num: int = 3

    def topic_lexicon(self, topic: str) -> list[str]:
        return [topic] + [f"{topic}{d}" for d in range(1, self.words_per_topic + 1)]

    def all_content_words(self) -> list[str]:
        words = []
        for t in self.topics:
            words.extend(self.topic_lexicon(t))
        return words

    def all_generable_words(self) -> list[str]:
        """Content words plus every truncation the fragment noise can emit."""
        words = set(self.all_content_words())
        for w in self.all_content_words():
            for j in range(2, len(w)):
                words.add(w[:j])
        return sorted(words)


def word_topic(word: str) -> str:
    """Topic stem of a word: the word with trailing digits stripped."""
    return word.rstrip(_DIGITS)


# ---------------------------------------------------------------------------
# Tokenization and reward mapping
# ---------------------------------------------------------------------------


def tokenize_word(word: str, tok: Tokenizer) -> list[str]:
    """Split ``word`` into consecutive chunks of at most ``tok.chunk_len`` chars."""
    if not word:
        raise DatagenError("cannot tokenize an empty word")
    n = tok.chunk_len
    return [word[i : i + n] for i in range(0, len(word), n)]


def map_word_rewards(words: list[WordAnnotation], tok: Tokenizer) -> list[tuple[str, int]]:
    """Expand word-level rewards to token level.

    Every token emitted for a word inherits that word's category, so the
    per-word mean token reward equals the word reward under any tokenizer.
    """
    out: list[tuple[str, int]] = []
    for ann in words:
        for t in tokenize_word(ann.word, tok):
            out.append((t, ann.category))
    return out


def annotate_episode(
    history: list[HistoryEvent],
    response_words: list[str],
    rules: AnnotatorConfig,
) -> tuple[list[WordAnnotation], int]:
    """Rule-oracle annotation of a response against a user history.

    A content word is relevant (2) iff its topic stem appears among the
    history's content words, irrelevant (1) otherwise; stopwords and
    separators get 0. The sentence reward is 2 when the relevant fraction
    among content words reaches ``rules.tau``, else 1.

    Raises :class:`AnnotationError` when the response has no content words,
    since the sentence reward is undefined there.
    """
    if not history:
        raise DatagenError("history must be non-empty")
    topics = set()
    for ev in history:
        for w in ev.text.split():
            if w not in rules.stopwords:
                topics.add(word_topic(w))

    annotations: list[WordAnnotation] = []
    n_content = 0
    n_relevant = 0
    for w in response_words:
        if w in rules.stopwords:
            annotations.append(WordAnnotation(w, CAT_MASKED))
            continue
        n_content += 1
        if word_topic(w) in topics:
            n_relevant += 1
            annotations.append(WordAnnotation(w, CAT_RELEVANT))
        else:
            annotations.append(WordAnnotation(w, CAT_IRRELEVANT))

    if n_content == 0:
        raise AnnotationError("response has no content words; sentence reward undefined")
    sentence = CAT_RELEVANT if n_relevant / n_content >= rules.tau else CAT_IRRELEVANT
    return annotations, sentence


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


def generate_corpus(
    seed: int,
    n: int,
    cfg: CorpusConfig | None = None,
    rules: AnnotatorConfig | None = None,
) -> list[EpisodeRecord]:
    """Generate ``n`` episodes, deterministic in ``seed``.

    Each episode draws its own RNG stream from (seed, episode index), so
    generation is order-independent and parallelizable across episodes.
    """
    if n < 1:
        raise DatagenError(f"n must be >= 1, got {n}")
    cfg = cfg or CorpusConfig()
    rules = rules or AnnotatorConfig()

    records = []
    skipped = 0
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        rec = _generate_episode(f"ep-{seed}-{i:05d}", rng, cfg, rules)
        if rec is None:
            skipped += 1
        else:
            records.append(rec)
    if skipped:
        warnings.warn(f"skipped {skipped} episodes with undefined sentence reward")
    return records


def _generate_episode(ep_id, rng, cfg: CorpusConfig, rules: AnnotatorConfig):
    n_interests = int(rng.integers(1, cfg.max_interests + 1))
    interests = list(rng.choice(len(cfg.topics), size=n_interests, replace=False))
    interest_topics = [cfg.topics[j] for j in interests]
    other_topics = [t for t in cfg.topics if t not in interest_topics]

    interest_words = [w for t in interest_topics for w in cfg.topic_lexicon(t)]
    other_words = [w for t in other_topics for w in cfg.topic_lexicon(t)]

    n_events = int(rng.integers(cfg.min_history, cfg.max_history + 1))
    history = []
    for _ in range(n_events):
        kind = HISTORY_KINDS[rng.integers(0, len(HISTORY_KINDS))]
        k = int(rng.integers(1, 4))
        words = [interest_words[j] for j in rng.integers(0, len(interest_words), size=k)]
        history.append(HistoryEvent(kind, " ".join(words)))

    response: list[str] = []
    n_words = int(rng.integers(cfg.min_response_words, cfg.max_response_words + 1))
    for _ in range(n_words):
        if rng.random() < cfg.fragment_rate:
            # truncation noise, in runs, so the reward model sees the
            # malformed patterns a policy could otherwise exploit
            for _ in range(int(rng.integers(1, 4))):
                w = interest_words[rng.integers(0, len(interest_words))]
                response.append(w[: int(rng.integers(2, len(w)))])
        elif rng.random() < cfg.on_topic_rate:
            response.append(interest_words[rng.integers(0, len(interest_words))])
        else:
            response.append(other_words[rng.integers(0, len(other_words))])
        if rng.random() < cfg.separator_rate:
            response.append(",")
    if response and response[-1] == ",":
        response.pop()

    try:
        annotations, sentence = annotate_episode(history, response, rules)
    except AnnotationError:
        return None

    queries = []
    for _ in range(cfg.target_query_num):
        qk = int(rng.integers(1, 4))
        queries.append(" ".join(interest_words[j] for j in rng.integers(0, len(interest_words), size=qk)))

    return EpisodeRecord(
        id=ep_id,
        history=tuple(history),
        prompt_words=tuple(interest_topics),
        response_words=tuple(annotations),
        sentence_reward=sentence,
        target_queries=tuple(queries),
    )


# ---------------------------------------------------------------------------
# JSONL round trip
# ---------------------------------------------------------------------------


def store_dataset(path, records: list[EpisodeRecord]) -> None:
    """Write records as JSONL, one object per line, UTF-8."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "id": r.id,
                "history": [{"kind": ev.kind, "text": ev.text} for ev in r.history],
                "prompt_words": list(r.prompt_words),
                "response_words": [[a.word, a.category] for a in r.response_words],
                "sentence_reward": r.sentence_reward,
                "target_queries": list(r.target_queries),
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_dataset(path) -> list[EpisodeRecord]:
    """Read a JSONL dataset; malformed lines raise :class:`ParseError`."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, f"invalid JSON: {e.msg}") from e
            try:
                records.append(
                    EpisodeRecord(
                        id=obj["id"],
                        history=tuple(HistoryEvent(ev["kind"], ev["text"]) for ev in obj["history"]),
                        prompt_words=tuple(obj["prompt_words"]),
                        response_words=tuple(WordAnnotation(w, c) for w, c in obj["response_words"]),
                        sentence_reward=obj["sentence_reward"],
                        target_queries=tuple(obj.get("target_queries", ())),
                    )
                )
            except (KeyError, TypeError, DatagenError) as e:
                raise ParseError(line_no, str(e)) from e
    return records


# ---------------------------------------------------------------------------
# Vocabulary and batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocab:
    """Token string <-> integer id mapping with reserved specials."""

    tokens: tuple[str, ...]
    index: dict = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def encode_token(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise OutOfVocabError(f"token {token!r} not in vocabulary") from None

    def decode_id(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise OutOfVocabError(f"id {token_id} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[token_id]


def build_vocab(tok: Tokenizer, cfg: CorpusConfig, rules: AnnotatorConfig | None = None) -> Vocab:
    """Enumerate every token the corpus can emit under ``tok``, plus specials.

    A word's first chunk enters the vocabulary with the word-start marker,
    the rest enter bare. Deterministic: specials first, then sorted tokens.
    """
    rules = rules or AnnotatorConfig()
    chunks = set()
    for w in cfg.all_generable_words():
        chunks.update(_marked_chunks(w, tok))
    for w in sorted(rules.stopwords):
        chunks.update(_marked_chunks(w, tok))
    ordered = (PAD_TOKEN, EOS_TOKEN) + tuple(sorted(chunks))
    return Vocab(ordered)


def _marked_chunks(word: str, tok: Tokenizer) -> list[str]:
    parts = tokenize_word(word, tok)
    return [WORD_START + parts[0]] + parts[1:]


@dataclass
class TokenBatch:
    """Tokenized episodes in grid form, the shape consumed by training.

    ``activation_mask`` marks response tokens (the positions that can carry
    a reward); it implies ``attention_mask``. ``token_categories`` is 0
    everywhere the activation mask is off.
    """

    token_ids: np.ndarray        # int64 [n, T]
    attention_mask: np.ndarray   # bool  [n, T]
    activation_mask: np.ndarray  # bool  [n, T]
    token_categories: np.ndarray  # int64 [n, T]
    sentence_rewards: np.ndarray  # int64 [n]

    def __post_init__(self):
        if np.any(self.activation_mask & ~self.attention_mask):
            raise DatagenError("activation mask must imply attention mask")
        if np.any(self.token_categories[~self.activation_mask] != 0):
            raise DatagenError("token categories must be 0 outside the activation mask")

    @property
    def n_episodes(self) -> int:
        return self.token_ids.shape[0]

    def subset(self, idx) -> "TokenBatch":
        return TokenBatch(
            token_ids=self.token_ids[idx],
            attention_mask=self.attention_mask[idx],
            activation_mask=self.activation_mask[idx],
            token_categories=self.token_categories[idx],
            sentence_rewards=self.sentence_rewards[idx],
        )


def encode_word(word: str, tok: Tokenizer, vocab: Vocab) -> list[int]:
    """Token ids for one word; the first chunk carries the word-start marker."""
    return [vocab.encode_token(t) for t in _marked_chunks(word, tok)]


def encode_prompt(prompt_words, tok: Tokenizer, vocab: Vocab) -> list[int]:
    """Prompt token ids; word boundaries come from the start markers."""
    ids: list[int] = []
    for w in prompt_words:
        ids.extend(encode_word(w, tok, vocab))
    return ids


def encode_response_words(words: list[WordAnnotation], tok: Tokenizer, vocab: Vocab):
    """Response token ids and categories, ending with the end-of-sequence token.

    Every token of a word carries that word's category, exactly as in
    map_word_rewards; the end-of-sequence token is category 0.
    """
    ids: list[int] = []
    cats: list[int] = []
    for ann in words:
        word_ids = encode_word(ann.word, tok, vocab)
        ids.extend(word_ids)
        cats.extend([ann.category] * len(word_ids))
    ids.append(EOS_ID)
    cats.append(CAT_MASKED)
    return ids, cats


def encode_episodes(records: list[EpisodeRecord], tok: Tokenizer, vocab: Vocab) -> TokenBatch:
    """Pack episodes into a right-padded :class:`TokenBatch`."""
    if not records:
        raise DatagenError("cannot encode an empty record list")
    rows = []
    for r in records:
        p = encode_prompt(r.prompt_words, tok, vocab)
        resp, cats = encode_response_words(list(r.response_words), tok, vocab)
        rows.append((p, resp, cats, r.sentence_reward))

    T = max(len(p) + len(resp) for p, resp, _, _ in rows)
    n = len(rows)
    token_ids = np.full((n, T), PAD_ID, dtype=np.int64)
    attention = np.zeros((n, T), dtype=bool)
    activation = np.zeros((n, T), dtype=bool)
    categories = np.zeros((n, T), dtype=np.int64)
    sentence = np.zeros(n, dtype=np.int64)
    for i, (p, resp, cats, sr) in enumerate(rows):
        L = len(p) + len(resp)
        token_ids[i, : len(p)] = p
        token_ids[i, len(p) : L] = resp
        attention[i, :L] = True
        activation[i, len(p) : L] = True
        categories[i, len(p) : L] = cats
        sentence[i] = sr
    return TokenBatch(token_ids, attention, activation, categories, sentence)


def decode_response(ids: list[int], vocab: Vocab) -> list[str]:
    """Reassemble words from generated response token ids.

    A word-start marker opens a new word; bare chunks extend the current
    one. The end-of-sequence token and padding terminate the response.
    """
    words: list[str] = []
    current: list[str] = []
    for i in ids:
        if i in (EOS_ID, PAD_ID):
            break
        token = vocab.decode_id(int(i))
        if token.startswith(WORD_START):
            if current:
                words.append("".join(current))
            current = [token[len(WORD_START):]]
        else:
            current.append(token)
    if current:
        words.append("".join(current))
    return words


# ---------------------------------------------------------------------------
# Separable fixture for reward-model quality gates
# ---------------------------------------------------------------------------


def separable_batch(seed: int, n: int, vocab: Vocab, min_len: int = 8, max_len: int = 16,
                    prompt_len: int = 4, tau: float = 0.5) -> TokenBatch:
    """A corpus whose token category is decided by token-id parity.

    Content ids with even parity are relevant (2), odd irrelevant (1);
    sprinkled stopword tokens keep category 0. The labels are exactly
    learnable from the current token alone, which pins down reward-model
    quality targets.
    """
    if n < 1:
        raise DatagenError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    content_ids = np.arange(2, len(vocab))
    masked_id = vocab.encode_token(WORD_START + ",")
    rows = []
    T = 0
    for _ in range(n):
        L = int(rng.integers(min_len, max_len + 1))
        resp_ids = list(rng.choice(content_ids, size=L))
        # sprinkle category-0 carriers to exercise the masked class
        for j in range(3, len(resp_ids), 4):
            resp_ids[j] = masked_id
        resp_ids.append(EOS_ID)
        cats = [0 if i in (masked_id, EOS_ID) else (2 if i % 2 == 0 else 1) for i in resp_ids]
        prompt = list(rng.choice(content_ids, size=prompt_len))
        rows.append((prompt, resp_ids, cats))
        T = max(T, len(prompt) + len(resp_ids))

    token_ids = np.full((n, T), PAD_ID, dtype=np.int64)
    attention = np.zeros((n, T), dtype=bool)
    activation = np.zeros((n, T), dtype=bool)
    categories = np.zeros((n, T), dtype=np.int64)
    sentence = np.zeros(n, dtype=np.int64)
    for i, (p, resp, cats) in enumerate(rows):
        L = len(p) + len(resp)
        token_ids[i, : len(p)] = p
        token_ids[i, len(p) : L] = resp
        attention[i, :L] = True
        activation[i, len(p) : L] = True
        categories[i, len(p) : L] = cats
        content = [c for c in cats if c in (1, 2)]
        frac = sum(c == 2 for c in content) / len(content)
        sentence[i] = CAT_RELEVANT if frac >= tau else CAT_IRRELEVANT
    return TokenBatch(token_ids, attention, activation, categories, sentence)

"""Shared test machinery: synthetic fixtures and independent oracles.

The oracles here deliberately avoid the library's vectorized code paths
(explicit Python loops over exp/sum) so they can serve as independent
references for the loss and metric implementations.
"""

import math

import numpy as np

from elink.candidates import PageLinks, PhraseTable
from elink.corpus import Context, MentionLabel, TokenVocab
from elink.model import predict_disambiguation

N_FILLERS = 20


def make_world(n_entities=200, n_contexts=50, seed=0, ctx_len=12, mentions_per_context=2):
    """A tiny linking world with planted mention/entity correlations.

    Entity i surfaces as name token "n{i//2}" (so entity pairs share an
    ambiguous name) and co-occurs with its unique topic token "t{i}"; a
    model must combine both to disambiguate. Returns (token vocab,
    contexts, phrase table, page links).
    """
    rng = np.random.default_rng(seed)
    n_names = n_entities // 2
    tokens = ["[PAD]", "[UNK]", "[MASK]", "[SEP]"]
    tokens += [f"f{i}" for i in range(N_FILLERS)]
    name_base = len(tokens)
    tokens += [f"n{i}" for i in range(n_names)]
    topic_base = len(tokens)
    tokens += [f"t{i}" for i in range(n_entities)]
    vocab = TokenVocab(tokens)

    contexts = []
    for j in range(n_contexts):
        ents = rng.choice(n_entities, size=mentions_per_context, replace=False)
        toks = (4 + rng.integers(0, N_FILLERS, size=ctx_len)).tolist()
        positions = rng.choice(ctx_len - 1, size=2 * mentions_per_context, replace=False)
        labels = []
        for m, ent in enumerate(ents):
            p_name, p_topic = int(positions[2 * m]), int(positions[2 * m + 1])
            toks[p_name] = name_base + int(ent) // 2
            toks[p_topic] = topic_base + int(ent)
            labels.append(MentionLabel((p_name, p_name), int(ent), f"n{int(ent) // 2}"))
        contexts.append(
            Context(
                tokens=toks,
                char_offsets=[(i, i + 1) for i in range(ctx_len)],
                doc_id=f"doc{j}",
                labels=labels,
            )
        )

    phrase = PhraseTable({f"n{i}": [2 * i, 2 * i + 1] for i in range(n_names)})
    pages = PageLinks({c.doc_id: [l.entity for l in c.labels] for c in contexts})
    return vocab, contexts, phrase, pages


def all_entity_accuracy(params, contexts) -> float:
    """Disambiguation accuracy (%) over the full entity vocabulary, gold spans."""
    correct = total = 0
    for c in contexts:
        labeled = [l for l in c.labels if l.entity is not None]
        if not labeled:
            continue
        preds = predict_disambiguation(params, c.tokens, [l.span for l in labeled])
        for p, l in zip(preds, labeled):
            total += 1
            correct += int(p == l.entity)
    return 100.0 * correct / total


def make_raw_world(out_dir, n_entities=10, n_docs=20, seed=0):
    """Raw-file twin of make_world for CLI runs: documents JSONL, vocab
    files, page-link / phrase-table / alias TSVs, written under out_dir.

    Returns a dict of paths plus the in-memory documents.
    """
    import json

    rng = np.random.default_rng(seed)
    n_names = n_entities // 2
    fillers = [f"f{i}" for i in range(N_FILLERS)]
    names = [f"n{i}" for i in range(n_names)]
    topics = [f"t{i}" for i in range(n_entities)]
    tokens = ["[PAD]", "[UNK]", "[MASK]", "[SEP]"] + fillers + names + topics

    docs = []
    for j in range(n_docs):
        ents = rng.choice(n_entities, size=2, replace=False)
        words, mentions = [], []
        pos = 0
        for ent in ents:
            for w, is_mention in (
                (fillers[int(rng.integers(0, N_FILLERS))], False),
                (names[int(ent) // 2], True),
                (topics[int(ent)], False),
            ):
                if is_mention:
                    mentions.append(
                        {"start_char": pos, "end_char": pos + len(w), "entity": f"E{int(ent)}"}
                    )
                words.append(w)
                pos += len(w) + 1
        docs.append(
            {
                "doc_id": f"doc{j}",
                "title": f"title {j}",
                "text": " ".join(words),
                "mentions": mentions,
            }
        )

    paths = {
        "docs": str(out_dir / "docs.jsonl"),
        "token_vocab": str(out_dir / "tokens.txt"),
        "entity_vocab": str(out_dir / "entities.txt"),
        "page_links": str(out_dir / "page_links.tsv"),
        "phrase_table": str(out_dir / "phrase.tsv"),
        "alias_table": str(out_dir / "aliases.tsv"),
    }
    with open(paths["docs"], "w", encoding="utf-8") as f:
        for d in docs:
            f.write(json.dumps(d) + "\n")
    with open(paths["token_vocab"], "w", encoding="utf-8") as f:
        f.write("\n".join(tokens) + "\n")
    with open(paths["entity_vocab"], "w", encoding="utf-8") as f:
        f.write("\n".join(f"E{i}" for i in range(n_entities)) + "\n")
    with open(paths["page_links"], "w", encoding="utf-8") as f:
        for d in docs:
            for m in d["mentions"]:
                f.write(f"{d['doc_id']}\t{m['entity']}\n")
    with open(paths["phrase_table"], "w", encoding="utf-8") as f:
        for i in range(n_names):
            f.write(f"n{i}\tE{2 * i}\t0\n")
            f.write(f"n{i}\tE{2 * i + 1}\t1\n")
    with open(paths["alias_table"], "w", encoding="utf-8") as f:
        for i in range(n_names):
            f.write(f"n{i}\tE{2 * i}\n")
            f.write(f"n{i}\tE{2 * i + 1}\n")
    return paths, docs


def candidate_invariant_sweep(master: np.random.Generator, n_trials: int) -> None:
    """Randomized assemble_candidates calls asserting the spec invariants.

    Runs in a regime where random entries are exactly observable: source
    pools sized to their budgets with golds drawn from the pools, so every
    chosen entity outside the pools must have come from the uniform-random
    fill. Asserts exact size, no duplicates, gold containment, determinism,
    and the min_random floor on every trial.
    """
    from elink.candidates import CandidateConfig, assemble_candidates
    from elink.corpus import MentionLabel

    for _ in range(n_trials):
        k = int(master.integers(6, 40))
        min_random = int(master.integers(1, max(2, k // 3)))
        left = k - min_random
        max_page = int(master.integers(0, left + 1))
        max_phrase = int(master.integers(0, left - max_page + 1))
        n_ent = int(master.integers(k + 20, k + 200))
        cfg = CandidateConfig(k=k, max_page=max_page, max_phrase=max_phrase,
                              min_random=min_random, rng_seed=int(master.integers(0, 2**32)))

        pool = master.permutation(n_ent)
        page_pool = [int(e) for e in pool[:max_page]]
        phrase_pool = [int(e) for e in pool[max_page : max_page + max_phrase]]
        links = PageLinks({"d": page_pool})
        phrase = PhraseTable({"s": phrase_pool})
        sourced = page_pool + phrase_pool

        n_golds = int(master.integers(0, min(3, len(sourced)) + 1)) if sourced else 0
        golds = []
        if n_golds:
            picks = master.choice(len(sourced), size=n_golds, replace=False)
            golds = list(dict.fromkeys(sourced[int(i)] for i in picks))
        labels = [MentionLabel((0, 0), g, "s") for g in golds] or [MentionLabel((0, 0), None, "s")]
        surfaces = ["s"] * len(labels)

        a = assemble_candidates(labels, surfaces, "d", cfg, links, phrase, n_ent)
        b = assemble_candidates(labels, surfaces, "d", cfg, links, phrase, n_ent)

        assert len(a.entities) == k, "exact size"
        assert len(set(a.entities)) == k, "no duplicates"
        for g in golds:
            assert a.entities.count(g) == 1, "gold containment"
        assert a.entities == b.entities and a.gold_positions == b.gold_positions, "determinism"
        n_random = sum(1 for e in a.entities if e not in set(sourced))
        assert n_random >= min_random, "random floor"


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------


def oracle_softmax_nll(scores_row, gold_idx) -> float:
    """Negative log softmax probability via explicit exp/sum loops."""
    m = max(scores_row)
    denom = 0.0
    for s in scores_row:
        denom += math.exp(s - m)
    return -((scores_row[gold_idx] - m) - math.log(denom))


def oracle_linking_loss(score_rows, gold_positions, n_examples, example_of) -> float:
    """Sum of per-mention NLLs grouped by example, averaged over examples."""
    per_example = [0.0] * n_examples
    for row, gold, ex in zip(score_rows, gold_positions, example_of):
        per_example[ex] += oracle_softmax_nll(list(row), gold)
    return sum(per_example) / n_examples


def oracle_bio_loss(logits, targets, valid) -> float:
    """Mean per-valid-token 3-way cross-entropy via explicit loops."""
    total = 0.0
    count = 0
    B, T, _ = logits.shape
    for b in range(B):
        for t in range(T):
            if not valid[b][t]:
                continue
            total += oracle_softmax_nll(list(logits[b][t]), int(targets[b][t]))
            count += 1
    return total / count if count else 0.0


def oracle_micro_f1(pred_docs, gold_docs):
    """Micro P/R/F1 by brute-force set intersection."""
    tp = n_pred = n_gold = 0
    for preds, golds in zip(pred_docs, gold_docs):
        pset, gset = set(preds), set(golds)
        n_pred += len(pset)
        n_gold += len(gset)
        for item in pset:
            if item in gset:
                tp += 1
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def fd_group_errors(loss_fn, params, h=1e-3, norm_floor=1e-6) -> dict[str, float]:
    """Per-parameter-group relative error between analytic gradients and
    central finite differences (64-bit throughout).

    The floor keeps structurally-zero-gradient groups (e.g. attention key
    biases, which cancel in the softmax) from turning FD round-off noise
    into a spurious relative error.
    """
    from elink.model import backward

    grads = backward(loss_fn(), params)
    report = {}
    for name, tensor in params.items():
        analytic = grads[name]
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), norm_floor)
        report[name] = float(np.linalg.norm(analytic - numeric) / denom)
    return report

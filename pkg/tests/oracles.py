"""Independent brute-force references used by the test-suite.

Nothing here imports the code under test beyond plain data types, so a bug in
the package cannot silently propagate into the expected values.
"""

from __future__ import annotations

from fractions import Fraction


def _split(scheme: str, word: str) -> list[str]:
    if scheme == "BPE":
        return [c for c in word[:-1]] + [word[-1] + "</w>"]
    if scheme == "WordPiece":
        return [word[0]] + ["##" + c for c in word[1:]]
    if scheme == "BLBPE":
        from cmlid.subword import BYTE_TO_CHAR  # the byte map is data, not logic

        return [BYTE_TO_CHAR[b] for b in (" " + word).encode("utf-8")]
    raise ValueError(scheme)


def _join(scheme: str, a: str, b: str) -> str:
    return a + (b[2:] if scheme == "WordPiece" else b)


def brute_force_merges(scheme: str, sentences: list[list[str]], target_size: int) -> list[tuple[str, str]]:
    """Recount every pair over every word occurrence from scratch at each step."""
    occurrences = [_split(scheme, w) for words in sentences for w in words]
    if scheme == "BLBPE":
        n_units = 5 + 256
    else:
        n_units = 5 + len({u for occ in occurrences for u in occ})
    vocab = set(u for occ in occurrences for u in occ)
    merges = []
    while n_units < target_size:
        pair_counts: dict[tuple[str, str], int] = {}
        unit_counts: dict[str, int] = {}
        for occ in occurrences:
            for u in occ:
                unit_counts[u] = unit_counts.get(u, 0) + 1
            for k in range(len(occ) - 1):
                p = (occ[k], occ[k + 1])
                pair_counts[p] = pair_counts.get(p, 0) + 1
        best = None
        best_score = None
        for p in sorted(pair_counts):
            c = pair_counts[p]
            if c < 2:
                continue
            if scheme == "WordPiece":
                score = Fraction(c, unit_counts[p[0]] * unit_counts[p[1]])
            else:
                score = Fraction(c)
            if best is None or score > best_score:
                best, best_score = p, score
        if best is None:
            break
        merged = _join(scheme, *best)
        new_occ = []
        for occ in occurrences:
            out = []
            k = 0
            while k < len(occ):
                if k + 1 < len(occ) and (occ[k], occ[k + 1]) == best:
                    out.append(merged)
                    k += 2
                else:
                    out.append(occ[k])
                    k += 1
            new_occ.append(out)
        occurrences = new_occ
        merges.append(best)
        if merged not in vocab:
            vocab.add(merged)
            n_units += 1
    return merges


def apply_merges_in_order(scheme: str, merges: list[tuple[str, str]], word: str) -> list[str]:
    symbols = _split(scheme, word)
    for a, b in merges:
        out = []
        k = 0
        while k < len(symbols):
            if k + 1 < len(symbols) and symbols[k] == a and symbols[k + 1] == b:
                out.append(_join(scheme, a, b))
                k += 2
            else:
                out.append(symbols[k])
                k += 1
        symbols = out
    return symbols


def greedy_longest_match(units: set[str], word: str) -> list[str] | None:
    pieces = []
    rest = word
    first = True
    while rest:
        for end in range(len(rest), 0, -1):
            cand = rest[:end] if first else "##" + rest[:end]
            if cand in units:
                pieces.append(cand)
                rest = rest[end:]
                first = False
                break
        else:
            return None
    return pieces


def brute_force_metrics(counts) -> dict:
    """Recount P/R/F1 from an expanded list of (gold, pred) word pairs."""
    from cmlid.corpus import LABELS
    from cmlid.evaluation import LabelScores

    pairs = []
    for i, g in enumerate(LABELS):
        for j, p in enumerate(LABELS):
            pairs.extend([(g, p)] * int(counts[i][j]))
    per = {}
    for lab in LABELS:
        tp = sum(1 for g, p in pairs if g == lab and p == lab)
        fp = sum(1 for g, p in pairs if g != lab and p == lab)
        fn = sum(1 for g, p in pairs if g == lab and p != lab)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per[lab] = LabelScores(prec, rec, f1, tp + fn)
    n = len(pairs)
    if n == 0:
        return {"per_label": per, "weighted": LabelScores(0.0, 0.0, 0.0, 0), "accuracy": 0.0}
    avg = lambda attr: sum(getattr(per[lab], attr) * per[lab].support for lab in LABELS) / n
    weighted = LabelScores(avg("precision"), avg("recall"), avg("f1"), n)
    accuracy = sum(1 for g, p in pairs if g == p) / n
    return {"per_label": per, "weighted": weighted, "accuracy": accuracy}


def central_difference(f, params: dict, name: str, idx: tuple, h: float = 1e-4) -> float:
    """(f(p + h) - f(p - h)) / 2h for one scalar entry; restores the entry afterwards."""
    arr = params[name]
    old = arr[idx]
    arr[idx] = old + h
    up = f(params)
    arr[idx] = old - h
    down = f(params)
    arr[idx] = old
    return (up - down) / (2 * h)


def gradient_check(params: dict, grads: dict, f, n_per_tensor: int, rng, h: float = 1e-4) -> float:
    """Worst relative error between analytic ``grads`` and central differences."""
    worst = 0.0
    for name, arr in params.items():
        for _ in range(n_per_tensor):
            idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
            num = central_difference(f, params, name, idx, h)
            ana = float(grads[name][idx])
            denom = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / denom)
    return worst

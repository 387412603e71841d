"""Direct-formula oracles for the hand-evaluated loss and metric cases.

Plain ``math`` only, no package imports, so the frozen numbers in the test
modules stay independent of the code paths they check. Run as a script to
print the values.
"""

import math


def softmax(xs):
    m = max(xs)
    es = [math.exp(x - m) for x in xs]
    tot = sum(es)
    return [e / tot for e in es]


def kl(q, p):
    return sum(qi * math.log(qi / pi) for qi, pi in zip(q, p) if qi > 0)


def article_retrieval_mse(article_emb, docs):
    d = len(article_emb)
    return sum(sum((a - b) ** 2 for a, b in zip(article_emb, doc)) for doc in docs) / (len(docs) * d)


def article_generation_mse(student_rows, teacher_rows):
    v = len(student_rows[0])
    total = sum((s - t) ** 2 for sr, tr in zip(student_rows, teacher_rows) for s, t in zip(sr, tr))
    return total / (len(student_rows) * v)


def chunk_retrieval_literal(q_rows, p_rows):
    # q_rows[j], p_rows[j]: distributions conditioned on doc j's assigned chunk, evaluated at j
    return sum(q_rows[j][j] * math.log(q_rows[j][j] / p_rows[j][j]) for j in range(len(q_rows)))


def rouge_n_f1(cand, ref, n):
    def grams(toks):
        out = {}
        for i in range(len(toks) - n + 1):
            g = tuple(toks[i:i + n])
            out[g] = out.get(g, 0) + 1
        return out

    c, r = grams(cand.lower().split()), grams(ref.lower().split())
    overlap = sum(min(v, r.get(g, 0)) for g, v in c.items())
    p = overlap / sum(c.values())
    rec = overlap / sum(r.values())
    return 0.0 if overlap == 0 else 2 * p * rec / (p + rec)


def lcs(a, b):
    best = 0
    # exhaustive over subsequences of the shorter list
    from itertools import combinations
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for k in range(len(short), 0, -1):
        for idx in combinations(range(len(short)), k):
            sub = [short[i] for i in idx]
            it = iter(long_)
            if all(tok in it for tok in sub):
                return k
    return best


def okapi(query, docs, k1=0.9, b=0.4):
    toks = [d.lower().split() for d in docs]
    n = len(toks)
    avgdl = sum(len(t) for t in toks) / n
    out = []
    for t in toks:
        total = 0.0
        for term in query.lower().split():
            df = sum(1 for u in toks if term in u)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            tf = t.count(term)
            total += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(t) / avgdl))
        out.append(total)
    return out


BM25_DOCS = [
    "gun owners filed a lawsuit against the city",
    "the lawsuit was dismissed",
    "gun sales rose gun shows expanded",
    "taxes and tolls rose in ohio",
    "a federal gun lawsuit settled after a long gun lawsuit",
]

VALUES = {}

# perplexity distillation: s = (1, 0), log p_L = (-1, -2)
VALUES["pdist"] = kl(softmax([-1.0, -2.0]), softmax([1.0, 0.0]))
# same log-likelihoods, sharper retriever scores s = (3, 0)
VALUES["pdist_sharp"] = kl(softmax([-1.0, -2.0]), softmax([3.0, 0.0]))
# article retrieval loss
VALUES["ret_g_zero"] = article_retrieval_mse([0.5, 0.5], [[0.5, 0.5]])
VALUES["ret_g"] = article_retrieval_mse([0.5, 0.5], [[1.0, 0.0]])
VALUES["ret_g_dup"] = article_retrieval_mse([0.5, 0.5], [[1.0, 0.0], [1.0, 0.0]])
# article generation loss, one step, |V|=2
VALUES["lm_g"] = article_generation_mse([[0.6, 0.4]], [[0.5, 0.5]])
# chunk retrieval loss, N=2: p uniform, q = (0.73, 0.27) for j=1 and mirrored for j=2
q1 = [0.73, 0.27]
q2 = [0.27, 0.73]
VALUES["ret_c"] = chunk_retrieval_literal([q1, q2], [[0.5, 0.5], [0.5, 0.5]])
# chunk generation loss
VALUES["lm_c"] = kl([0.7, 0.3], [0.5, 0.5])
# bm25, query "gun lawsuit"
VALUES["bm25"] = okapi("gun lawsuit", BM25_DOCS)
# metrics
VALUES["rouge1"] = rouge_n_f1("the cat sat", "the cat", 1)
_l = lcs("a b c".split(), "a x c".split())
VALUES["rougeL"] = 2 * (_l / 3) * (_l / 3) / ((_l / 3) + (_l / 3))
VALUES["summacc"] = ((1.0 + 0.5) / 2 + 0.8) / 2
_counts = {"false": 388, "mixture": 532, "true": 67}
_n = sum(_counts.values())
_f1_major = 2 * (532 / _n) * 1.0 / ((532 / _n) + 1.0)
VALUES["majority_macro_f1"] = _f1_major / 3
_vals = [0.2, 0.3, 0.4]
_mean = sum(_vals) / 3
VALUES["seed_mean"] = _mean
VALUES["seed_std"] = math.sqrt(sum((v - _mean) ** 2 for v in _vals) / 2)

if __name__ == "__main__":
    for k, v in VALUES.items():
        print(f"{k} = {v!r}")

"""Scalar-by-scalar forward pass of a seed-initialised tanh MLP block.

Init: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn from the init stream
(tag 3, round = silo index) in layout order W1 (D x H, row-major), b1 (H),
W2 (H x E, row-major), b2 (E). u = (next_u64 >> 11) * 2^-53.
"""
import math

from minibatch_golden import Stream

TAG_INIT = 3


def init_mlp(seed, silo, d, h, e):
    s = Stream(seed, TAG_INIT, silo)

    def uni(bound):
        u = (s.next_u64() >> 11) * (2.0 ** -53)
        return -bound + 2.0 * bound * u

    a1 = 1.0 / math.sqrt(d)
    a2 = 1.0 / math.sqrt(h)
    w1 = [[uni(a1) for _ in range(h)] for _ in range(d)]
    b1 = [uni(a1) for _ in range(h)]
    w2 = [[uni(a2) for _ in range(e)] for _ in range(h)]
    b2 = [uni(a2) for _ in range(e)]
    return w1, b1, w2, b2


def forward(params, row):
    w1, b1, w2, b2 = params
    h = len(b1)
    hidden = []
    for c in range(h):
        acc = b1[c]
        for r, x in enumerate(row):
            acc += x * w1[r][c]
        hidden.append(math.tanh(acc))
    out = []
    for e in range(len(b2)):
        acc = b2[e]
        for c in range(h):
            acc += hidden[c] * w2[c][e]
        out.append(acc)
    return out


if __name__ == "__main__":
    params = init_mlp(7, 1, 3, 4, 2)
    print("b2 =", [repr(v) for v in params[3]])
    print("forward =", [repr(v) for v in forward(params, [0.5, -1.25, 2.0])])

"""Exhaustive dense oracle for the coupled market on a tiny binary tree.

Independent of the engine: the tree, the recursions, and the unknown layout
are written out literally, node by node, and the resulting dense linear
system is solved with numpy.  Scalar securities, two individually tracked
minor agents, constant coefficients.

Normalized conventions match the engine's contract: the major position is
per-capita, the flow rule and the price read the backward fields through the
conditional expectation of their next-step values, and the flow vanishes at
the horizon.
"""

from __future__ import annotations

import numpy as np


class TinyTreeOracle:
    FIELDS = ["x0", "X1", "X2", "R1", "R2", "p0", "Y1", "Y2", "P1", "P2"]

    def __init__(self, K=2, T=1.0, *, delta, lam, lam0, l, sig0, cf, hf, cg, hg,
                 l0, s0, c0f, h0f, c0g, h0g, chi0, xi1, xi2):
        self.K, self.T = K, T
        self.dt = T / K
        self.p = dict(delta=delta, lam=lam, lam0=lam0, l=l, sig0=sig0, cf=cf,
                      hf=hf, cg=cg, hg=hg, l0=l0, s0=s0, c0f=c0f, h0f=h0f,
                      c0g=c0g, h0g=h0g, chi0=chi0, xi1=xi1, xi2=xi2)
        # binary tree, breadth first: level k holds 2**k nodes
        self.levels = [[0]]
        next_id = 1
        for k in range(1, K + 1):
            level = list(range(next_id, next_id + 2**k))
            self.levels.append(level)
            next_id += 2**k
        self.num_nodes = next_id
        self.children = {}
        self.dw = {0: 0.0}
        step = np.sqrt(self.dt)
        for k in range(K):
            for i, v in enumerate(self.levels[k]):
                kids = self.levels[k + 1][2 * i: 2 * i + 2]
                self.children[v] = kids
                self.dw[kids[0]] = +step
                self.dw[kids[1]] = -step
        self.index = {(f, v): i
                      for i, (f, v) in enumerate(
                          (f, v) for v in range(self.num_nodes) for f in self.FIELDS)}

    def solve(self) -> dict:
        n = len(self.index)
        A = np.zeros((n, n))
        rhs = np.zeros(n)
        row = 0
        p = self.p
        dt = self.dt
        lam_inv = 1.0 / p["lam"]
        v0bar = 1.0 / (p["lam0"] + 2.0 * p["lam"])
        ratio = p["delta"] / (1.0 - p["delta"])

        def put(terms, const):
            nonlocal row
            for (f, v), c in terms.items():
                A[row, self.index[(f, v)]] += c
            rhs[row] = const
            row += 1

        # initial conditions
        put({("x0", 0): 1.0}, p["chi0"])
        put({("X1", 0): 1.0}, p["xi1"])
        put({("X2", 0): 1.0}, p["xi2"])
        put({("R1", 0): 1.0}, 0.0)
        put({("R2", 0): 1.0}, 0.0)

        def pre(f, v):
            """Coefficients of the conditional expectation of f over v's children."""
            return {(f, c): 0.5 for c in self.children[v]}

        def combine(*weighted):
            out = {}
            for coeffs, w in weighted:
                for key, c in coeffs.items():
                    out[key] = out.get(key, 0.0) + w * c
            return out

        for k in range(self.K):
            for v in self.levels[k]:
                # flow rule b(v) = v0bar(-p0~ + (Y1~+Y2~)/2 + (P1~+P2~)/2)
                b = combine((pre("p0", v), -v0bar),
                            (pre("Y1", v), v0bar / 2), (pre("Y2", v), v0bar / 2),
                            (pre("P1", v), v0bar / 2), (pre("P2", v), v0bar / 2))
                for c in self.children[v]:
                    # x0(c) = x0(v) + dt (b + l0) + s0 dW
                    put(combine(({("x0", c): 1.0, ("x0", v): -1.0}, 1.0), (b, -dt)),
                        dt * p["l0"] + p["s0"] * self.dw[c])
                    # X_i(c): drift -lam^{-1}(Yi~ - mean Y~) - b + l
                    for me, other, Xf in (("Y1", "Y2", "X1"), ("Y2", "Y1", "X2")):
                        dev = combine((pre(me, v), lam_inv / 2), (pre(other, v), -lam_inv / 2))
                        put(combine(({(Xf, c): 1.0, (Xf, v): -1.0}, 1.0),
                                    (dev, dt), (b, dt)),
                            dt * p["l"] + p["sig0"] * self.dw[c])
                    # R_i(c): drift lam^{-1}(Pi~ - mean P~) + b
                    for me, other, Rf in (("P1", "P2", "R1"), ("P2", "P1", "R2")):
                        dev = combine((pre(me, v), lam_inv / 2), (pre(other, v), -lam_inv / 2))
                        put(combine(({(Rf, c): 1.0, (Rf, v): -1.0}, 1.0),
                                    (dev, -dt), (b, -dt)), 0.0)
                # backward recursions at v
                put(combine(({("p0", v): 1.0}, 1.0), (pre("p0", v), -1.0),
                            ({("x0", v): -dt * p["c0f"]}, 1.0)), dt * p["h0f"])
                put(combine(({("Y1", v): 1.0}, 1.0), (pre("Y1", v), -1.0),
                            ({("X1", v): -dt * p["cf"]}, 1.0)), dt * p["hf"])
                put(combine(({("Y2", v): 1.0}, 1.0), (pre("Y2", v), -1.0),
                            ({("X2", v): -dt * p["cf"]}, 1.0)), dt * p["hf"])
                put(combine(({("P1", v): 1.0}, 1.0), (pre("P1", v), -1.0),
                            ({("R1", v): dt * p["cf"]}, 1.0)), 0.0)
                put(combine(({("P2", v): 1.0}, 1.0), (pre("P2", v), -1.0),
                            ({("R2", v): dt * p["cf"]}, 1.0)), 0.0)

        for v in self.levels[self.K]:
            put({("p0", v): 1.0, ("x0", v): -p["c0g"]}, p["h0g"])
            for me, f1, f2 in (("Y1", "X1", "X2"), ("Y2", "X2", "X1")):
                put({(me, v): 1.0,
                     (f1, v): -(p["cg"] + ratio * p["cg"] / 2),
                     (f2, v): -(ratio * p["cg"] / 2)},
                    p["hg"] + ratio * p["hg"])
            for me, r1, r2 in (("P1", "R1", "R2"), ("P2", "R2", "R1")):
                put({(me, v): 1.0,
                     (r1, v): p["cg"] * (1.0 + ratio / 2),
                     (r2, v): p["cg"] * ratio / 2}, 0.0)

        assert row == n
        x = np.linalg.solve(A, rhs)
        out = {f: np.array([x[self.index[(f, v)]] for v in range(self.num_nodes)])
               for f in self.FIELDS}
        # induced flow and price on interior nodes, horizon price from Y itself
        b = np.zeros(self.num_nodes)
        phi = np.zeros(self.num_nodes)
        for k in range(self.K):
            for v in self.levels[k]:
                kids = self.children[v]
                pres = {f: 0.5 * (out[f][kids[0]] + out[f][kids[1]])
                        for f in ("p0", "Y1", "Y2", "P1", "P2")}
                b[v] = v0bar * (-pres["p0"] + (pres["Y1"] + pres["Y2"]) / 2
                                + (pres["P1"] + pres["P2"]) / 2)
                phi[v] = -(pres["Y1"] + pres["Y2"]) / 2 + p["lam"] * b[v]
        for v in self.levels[self.K]:
            phi[v] = -(out["Y1"][v] + out["Y2"][v]) / 2
        out["b"] = b
        out["phi"] = phi
        return out

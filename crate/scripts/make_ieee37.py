#!/usr/bin/env python3
"""Generate the IEEE-37 feeder document used as the shipped fixture.

Source data: IEEE PES Distribution Test Feeders, 37-node feeder
(line configurations 721-724, line segment table, spot loads).

Normalization:
  * voltage base: 4.8 kV line-to-line (2.7713 kV line-to-neutral)
  * power base: 30 kVA per phase
  * impedance base: V_ln^2 / S_phase = 256 ohm
The regulator (799-701) and the 709-775 transformer are not modeled; bus 701
is the substation with a fixed balanced 1 p.u. source. All segments are
three-phase, giving 35 buses x 3 phases = 105 phase-nodes.

Loads are all delta connected (the feeder is a three-wire delta system); each
phase-pair is emitted as a separate injection unit. The spot load at 701 is
dropped because the substation voltage is fixed. Six DERs are attached per the
connection table used for the state estimation study (buses 705, 706, 707,
708, 710, 711), each connection rated 100 kW at unity power factor.

Switchable lines: (710,735), (703,730), (727,744) normally closed.
Tie lines: (742,744), (735,737), (703,741) normally open, built from
configuration 723 with the lengths listed in TIE_LINES.
"""
import json
import math
import sys

V_LL = 4800.0
S_PHASE = 30e3
Z_BASE = (V_LL / math.sqrt(3)) ** 2 / S_PHASE
MILE_FT = 5280.0

# ohm/mile, upper triangle (aa, ab, ac, bb, bc, cc) as (R, X); shunt B in uS/mile
CONFIGS = {
    721: ([(0.2926, 0.1973), (0.0673, -0.0368), (0.0337, -0.0417),
           (0.2646, 0.1900), (0.0673, -0.0368), (0.2926, 0.1973)], 159.7919),
    722: ([(0.4751, 0.2973), (0.1629, -0.0326), (0.1234, -0.0607),
           (0.4488, 0.2678), (0.1629, -0.0326), (0.4751, 0.2973)], 127.8306),
    723: ([(1.2936, 0.6713), (0.4871, 0.2111), (0.4585, 0.1521),
           (1.3022, 0.6326), (0.4871, 0.2111), (1.2936, 0.6713)], 74.8405),
    724: ([(2.0952, 0.7758), (0.5204, 0.2738), (0.4926, 0.2123),
           (2.1068, 0.7398), (0.5204, 0.2738), (2.0952, 0.7758)], 60.2483),
}

SEGMENTS = [
    (701, 702, 960, 722), (702, 705, 400, 724), (702, 713, 360, 723),
    (702, 703, 1320, 722), (703, 727, 240, 724), (703, 730, 600, 723),
    (704, 714, 80, 724), (704, 720, 800, 723), (705, 742, 320, 724),
    (705, 712, 240, 724), (706, 725, 280, 724), (707, 724, 760, 724),
    (707, 722, 120, 724), (708, 733, 320, 723), (708, 732, 320, 724),
    (709, 731, 600, 723), (709, 708, 320, 723), (710, 735, 200, 724),
    (710, 736, 1280, 724), (711, 741, 400, 723), (711, 740, 200, 724),
    (713, 704, 520, 723), (714, 718, 520, 724), (720, 707, 920, 724),
    (720, 706, 600, 723), (727, 744, 280, 723), (730, 709, 200, 723),
    (733, 734, 560, 723), (734, 737, 640, 723), (734, 710, 520, 724),
    (737, 738, 400, 723), (738, 711, 400, 723), (744, 728, 200, 724),
    (744, 729, 280, 724),
]

SWITCHABLE = {(710, 735), (703, 730), (727, 744)}
TIE_LINES = [(742, 744, 400, 723), (735, 737, 400, 723), (703, 741, 600, 723)]

# bus -> [(pair, kW, kvar)]
LOADS = {
    712: [("ca", 85, 40)], 713: [("ca", 85, 40)],
    714: [("ab", 17, 8), ("bc", 21, 10)], 718: [("ab", 85, 40)],
    720: [("ca", 85, 40)], 722: [("bc", 140, 70), ("ca", 21, 10)],
    724: [("bc", 42, 21)], 725: [("bc", 42, 21)], 727: [("ca", 42, 21)],
    728: [("ab", 42, 21), ("bc", 42, 21), ("ca", 42, 21)],
    729: [("ab", 42, 21)], 730: [("ca", 85, 40)], 731: [("bc", 85, 40)],
    732: [("ca", 42, 21)], 733: [("ab", 85, 40)], 734: [("ca", 42, 21)],
    735: [("ca", 85, 40)], 736: [("bc", 42, 21)], 737: [("ab", 140, 70)],
    738: [("ab", 126, 62)], 740: [("ca", 85, 40)], 741: [("ca", 42, 21)],
    742: [("ab", 8, 4), ("bc", 85, 40)], 744: [("ab", 42, 21)],
}
DERS = {
    705: ["ab", "bc"], 706: ["bc"], 707: ["bc", "ca"],
    708: ["bc"], 710: ["ab"], 711: ["ca"],
}
DER_KW = 100.0


def matrices(config, length_ft):
    tri, b_us = CONFIGS[config]
    miles = length_ft / MILE_FT
    idx = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    zr = [[0.0] * 3 for _ in range(3)]
    zi = [[0.0] * 3 for _ in range(3)]
    for (i, j), (r, x) in zip(idx, tri):
        zr[i][j] = zr[j][i] = r * miles / Z_BASE
        zi[i][j] = zi[j][i] = x * miles / Z_BASE
    ysh_i = [[0.0] * 3 for _ in range(3)]
    for k in range(3):
        ysh_i[k][k] = b_us * 1e-6 * miles * Z_BASE
    flat = lambda m: [v for row in m for v in row]
    zero = [0.0] * 9
    return flat(zr), flat(zi), zero, flat(ysh_i)


def branch(f, t, length, config, switchable, closed):
    zr, zi, yr, yi = matrices(config, length)
    return {
        "id": f"{f}-{t}", "from": f, "to": t, "phases": "abc",
        "Z_real": zr, "Z_imag": zi, "Ysh_real": yr, "Ysh_imag": yi,
        "switchable": switchable, "closed": closed,
    }


def main():
    buses = [701]
    for f, t, _, _ in SEGMENTS:
        for b in (f, t):
            if b not in buses:
                buses.append(b)
    buses = [701] + sorted(b for b in buses if b != 701)

    branches = [branch(f, t, ln, cfg, (f, t) in SWITCHABLE, True)
                for f, t, ln, cfg in SEGMENTS]
    branches += [branch(f, t, ln, cfg, True, False) for f, t, ln, cfg in TIE_LINES]

    injections = []
    for bus in sorted(set(LOADS) | set(DERS)):
        for pair in DERS.get(bus, []):
            injections.append({"bus": bus, "kind": "der", "connection": "delta",
                               "terminals": pair, "rating": DER_KW * 1e3 / S_PHASE,
                               "rating_q": 0.0})
        for pair, kw, kvar in LOADS.get(bus, []):
            injections.append({"bus": bus, "kind": "load", "connection": "delta",
                               "terminals": pair, "rating": kw * 1e3 / S_PHASE,
                               "rating_q": kvar * 1e3 / S_PHASE})

    doc = {
        "schema": "feeder/1",
        "name": "ieee37",
        "base": {"v_ll_kv": V_LL / 1e3, "s_phase_kva": S_PHASE / 1e3,
                 "z_base_ohm": Z_BASE},
        "substation": 701,
        "buses": [{"id": b, "phases": "abc"} for b in buses],
        "branches": branches,
        "injections": injections,
    }
    json.dump(doc, sys.stdout, indent=1)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()

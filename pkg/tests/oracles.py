"""Independent reference implementations used to check the library.

Everything here is written with scalar ``math``/``cmath`` loops on purpose:
no shared code with the package beyond reading dataclass fields.
"""

import cmath
import math


def eta_forward(alpha_l, spacing, fwhm, t):
    a = alpha_l * fwhm / spacing * math.sqrt(math.pi / (4 * math.log(2)))
    g = 2 * math.pi * fwhm / math.sqrt(8 * math.log(2))
    return a * a * math.exp(-a) * math.exp(-(t * g) ** 2)


def positive_phase_kicks(pulses, dipole_difference, angle_deg, t):
    """Accumulated phase at ``t`` for instantaneous kicks at each pulse centre.

    ``pulses`` is a list of (centre, area in V s/m).
    """
    proj = 0.0 if angle_deg == 90 else math.cos(math.radians(angle_deg))
    total = 0.0
    for centre, area in pulses:
        if t >= centre:
            total += 2 * math.pi * dipole_difference * proj * area
    return total


def brute_force_intensity(freqs, classes, weights, times, phase_at):
    """|sum_j w_j exp(i 2 pi f_j t + i s_j phi(t))|^2 term by term."""
    out = []
    for t in times:
        phi = phase_at(t)
        acc = 0j
        for f, s, w in zip(freqs, classes, weights):
            acc += w * cmath.exp(1j * (2 * math.pi * f * t + s * phi))
        out.append(acc.real * acc.real + acc.imag * acc.imag)
    return out


def iterate_three_level(pop, p_row, branching, reps):
    """Excite from every ground level g with probabilities p_row[g][e], branch back, ``reps`` times."""
    pop = list(pop)
    for _ in range(reps):
        new = list(pop)
        for g in range(3):
            for e in range(3):
                moved = pop[g] * p_row[g][e]
                new[g] -= moved
                for g2 in range(3):
                    new[g2] += moved * branching[e][g2]
        pop = new
    return pop

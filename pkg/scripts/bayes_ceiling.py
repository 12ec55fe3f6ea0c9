#!/usr/bin/env python3
"""Accuracy of the generating mixture applied to the true latent parameters.

This is the best any method can do when it classifies patients from their
(tau, xi, s) alone, so it bounds the desk-scale accuracies.
"""
import argparse

import numpy as np

from mixcourse.likelihood import posterior_membership
from mixcourse.model import HyperParams, MixtureParams
from mixcourse.simulate import PRESETS, scenario_preset, simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-patients", type=int, default=20000)
    args = ap.parse_args()
    for name in sorted(PRESETS):
        sc = scenario_preset(name, n_patients=args.n_patients, n_visits=1)
        cohort = simulate(sc, seed=1)
        k = sc.n_clusters
        mix = MixtureParams(np.asarray(sc.proportions), sc.tau_mean, (sc.tau_sd,) * k, sc.xi_mean,
                            (sc.xi_sd,) * k, cohort.source_means, (sc.noise_sd,) * sc.n_features)
        probs = posterior_membership(cohort.individual, mix, HyperParams(sigma_source=sc.source_sd))
        pred = np.argmax(probs, axis=1)
        recall = [np.mean(pred[cohort.labels == c] == c) for c in range(k)]
        print(f"{name:15s} accuracy {np.mean(pred == cohort.labels):.3f}  recall "
              + " ".join(f"{r:.3f}" for r in recall))


if __name__ == "__main__":
    main()

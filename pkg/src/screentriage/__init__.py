"""Two-stage screening triage on synthetic phantom cohorts.

A per-view multi-task model reads one image at a time, a fusion classifier
combines four views with non-imaging attributes into a malignancy
probability, and a triage policy splits the caseload between a simulated
radiologist and the classifier under aggregate error-rate constraints.
Everything is trained and evaluated end to end on a seeded synthetic
cohort, deterministically.
"""

__version__ = "0.1.0"

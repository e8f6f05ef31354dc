"""Post-hoc integrity auditing for AI-generated research paper bundles.

Four checks over an artifact bundle (paper source, solver code,
bibliography, logs): reported-score verification against evaluator
reruns, specification-violation screening, reference existence and
metadata verification, and method-code alignment. Bundles that declare
their claims get native claim-provenance verification; those that do not
get a forensic scan recovered from the paper text.
"""

__version__ = "0.1.0"

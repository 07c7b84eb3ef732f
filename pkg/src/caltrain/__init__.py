"""Confidential and accountable collaborative CNN training at desk scale.

Participants seal their data with their own AES-GCM keys; a simulated
enclave (an isolated worker process) trains the in-enclave prefix of a
partitioned CNN over a framed boundary protocol; a KL-divergence exposure
assessor picks the partition layer; and a fingerprint linkage database
answers forensic nearest-neighbor queries that expose poisoned or
mislabeled training contributions.
"""

__version__ = "0.1.0"

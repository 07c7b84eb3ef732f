"""Simulated enclave: an isolated worker process plus its host-side handle.

Import :mod:`caltrain.enclave.handle` for the host side; the worker program
lives in :mod:`caltrain.enclave.worker` and is only ever spawned as a
subprocess.  This package initializer stays empty so the worker's import
footprint covers exactly the audited enclave build files.
"""

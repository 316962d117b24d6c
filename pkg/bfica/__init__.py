"""B-FICA: two-partition permissioned ledger for vehicle accident forensics."""

__version__ = "0.1.0"

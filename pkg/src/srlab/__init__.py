"""srlab: learn visitation-based rewards from demonstrations, validate them
against exact tabular oracles, and train offline agents on the result."""

__version__ = "0.1.0"

"""Context-aware selection and safe rollout of post-quantum crypto profiles
for vehicular links: cost model, evolutionary selector, transition protocol,
attack suite and experiment harness."""

__version__ = "0.1.0"

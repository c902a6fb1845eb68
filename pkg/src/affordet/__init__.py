"""Real-time affordance detection with a language-model refinement adapter."""

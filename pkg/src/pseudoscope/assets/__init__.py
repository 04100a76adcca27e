# Package data: prompt templates, default score table, price tables, SynthPAI schema.

# Toy model, logit lens, hijack identification, head metrics and interventions

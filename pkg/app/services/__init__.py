"""Pipeline services: scenes, networks, distillation, synchronization and evaluation."""

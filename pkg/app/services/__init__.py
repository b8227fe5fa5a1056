"""Service layer: model gateway, environments, rollouts, debugging and evaluation"""

﻿"""Model tests package"""

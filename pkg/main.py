"""
pkit MCP Server - 入口点

运行 pkit MCP 服务器
"""

from pkit.server import mcp

if __name__ == "__main__":
    mcp.run()

import subprocess
import importlib
import shutil


def check_command(cmd, name, args=("--version",)):
    print(f"\n[检查] {name}...")
    if shutil.which(cmd):
        try:
            output = subprocess.check_output([cmd, *args], stderr=subprocess.STDOUT, text=True)
            print(f"[✓] {name} 可用：\n{output.strip()}")
            return True
        except subprocess.CalledProcessError as e:
            print(f"[!] {name} 版本获取失败：{e}")
    else:
        print(f"[✗] {name} 未安装或未加入 PATH。")
    return False


def check_module(name, test_func=None):
    print(f"\n[检查] Python 模块：{name}...")
    try:
        module = importlib.import_module(name)
        print(f"[✓] {name} 已安装，版本 {getattr(module, '__version__', '未知')}")
        if test_func:
            test_func(module)
        return True
    except ImportError:
        print(f"[✗] {name} 未安装")
        return False


def test_torch(torch):
    print(f"  - CUDA 可用：{torch.cuda.is_available()}")
    if torch.cuda.is_available():
        print(f"  - CUDA 设备：{torch.cuda.get_device_name(0)}")
        print(f"  - CUDA 版本：{torch.version.cuda}")


def test_matplotlib(matplotlib):
    matplotlib.use("Agg")
    print(f"  - 绘图后端：{matplotlib.get_backend()}")


def main():
    """
    检查运行环境：各依赖模块的版本、CUDA 是否可用以及 ollama 命令

    Returns:
        dict: 模块名 → 是否可用
    """
    print("========= BMEmbed 环境检查工具 =========")

    check_command("nvidia-smi", "NVIDIA 驱动")

    status = {
        "torch": check_module("torch", test_torch),
        "transformers": check_module("transformers"),
        "numpy": check_module("numpy"),
        "scipy": check_module("scipy"),
        "matplotlib": check_module("matplotlib", test_matplotlib),
        "httpx": check_module("httpx"),
    }
    status["ollama"] = check_command("ollama", "Ollama", args=("list",))

    print("\n========= 检查完毕 =========")
    return status


if __name__ == "__main__":
    main()
